//! Dataset stain profiles: per-image stain statistics, the three fitted
//! Gaussians over colour matrices, concentration means and concentration
//! standard deviations, sampling, and JSON persistence.

use std::path::Path;

use nalgebra::{Cholesky, SMatrix, SVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{rgb_to_od, tissue_mask, Mask, OdBase, OdImage, RgbImage, TissueMask};
use crate::separation::{
    compute_concentrations, concentration_stats, estimate_stain_matrix, ChannelStats,
    ConcentrationMap, StainMatrix,
};

pub const SCHEMA_VERSION: u32 = 1;

/// Ridge added to every fitted covariance.
pub const COV_EPSILON: f64 = 1e-8;

/// Lower bound for sampled concentration standard deviations.
pub const MIN_SAMPLED_STD: f64 = 1e-6;

/// Colour-matrix draws attempted before giving up.
pub const MAX_COLOUR_DRAWS: usize = 8;

/// Which pixels concentration statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[derive(clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StatsDomain {
    All,
    #[default]
    Tissue,
}

impl StatsDomain {
    pub fn name(self) -> &'static str {
        match self {
            StatsDomain::All => "all",
            StatsDomain::Tissue => "tissue",
        }
    }
}

/// Conventions and parameters of the separation pipeline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainConfig {
    pub od_base: OdBase,
    pub stats_domain: StatsDomain,
    pub tissue_threshold: f64,
    pub angle_percentile: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        Self {
            od_base: OdBase::Ten,
            stats_domain: StatsDomain::Tissue,
            tissue_threshold: crate::imaging::DEFAULT_TISSUE_THRESHOLD,
            angle_percentile: crate::separation::DEFAULT_ANGLE_PERCENTILE,
        }
    }
}

/// Everything the separation pipeline produces for one image.
#[derive(Debug, Clone)]
pub struct Separation {
    pub od: OdImage,
    pub tissue: TissueMask,
    pub colour: StainMatrix,
    pub concentrations: ConcentrationMap,
    pub stats: ChannelStats,
}

/// OD conversion, tissue masking, Macenko estimation, concentration solve and
/// statistics for one image.
pub fn separate(img: &RgbImage, config: &StainConfig) -> Result<Separation> {
    let od = rgb_to_od(img);
    let tissue = tissue_mask(&od, config.tissue_threshold)?;
    let colour = estimate_stain_matrix(&od, &tissue, config.angle_percentile)?;
    let concentrations = compute_concentrations(&od, &colour)?;
    let stats = match config.stats_domain {
        StatsDomain::Tissue => concentration_stats(&concentrations, &tissue)?,
        StatsDomain::All => {
            concentration_stats(&concentrations, &Mask::full(img.height(), img.width())?)?
        }
    };
    Ok(Separation {
        od,
        tissue,
        colour,
        concentrations,
        stats,
    })
}

/// Colour matrix (row-major), concentration means and standard deviations
/// of one image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStainStats {
    pub c: [f64; 9],
    pub a: [f64; 3],
    pub d: [f64; 3],
}

impl ImageStainStats {
    pub fn new(colour: &StainMatrix, stats: &ChannelStats) -> Self {
        Self {
            c: colour.to_row_major(),
            a: stats.mean,
            d: stats.std,
        }
    }

    fn as_vector(&self) -> SVector<f64, 15> {
        let mut v = SVector::<f64, 15>::zeros();
        v.as_mut_slice()[..9].copy_from_slice(&self.c);
        v.as_mut_slice()[9..12].copy_from_slice(&self.a);
        v.as_mut_slice()[12..].copy_from_slice(&self.d);
        v
    }
}

pub fn extract_image_stats(img: &RgbImage, config: &StainConfig) -> Result<ImageStainStats> {
    let sep = separate(img, config)?;
    Ok(ImageStainStats::new(&sep.colour, &sep.stats))
}

/// Mergeable mean / co-moment accumulator over the stacked 15-vector
/// `[c; a; d]`.
#[derive(Debug, Clone, Default)]
pub struct ProfileAccumulator {
    count: usize,
    mean: SVector<f64, 15>,
    comoment: SMatrix<f64, 15, 15>,
}

impl ProfileAccumulator {
    pub fn push(&mut self, stats: &ImageStainStats) {
        let x = stats.as_vector();
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.comoment += delta * (x - self.mean).transpose();
    }

    pub fn merge(&mut self, other: &ProfileAccumulator) {
        if other.count == 0 {
            return;
        }
        if self.count == 0 {
            *self = other.clone();
            return;
        }
        let n_a = self.count as f64;
        let n_b = other.count as f64;
        let n = n_a + n_b;
        let delta = other.mean - self.mean;
        self.mean += delta * (n_b / n);
        self.comoment += other.comoment + delta * delta.transpose() * (n_a * n_b / n);
        self.count += other.count;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Sample covariance (divisor n - 1, zero for n = 1) plus the ridge.
    pub fn finish(&self, config: &StainConfig, diagonal: bool) -> Result<StainProfile> {
        if self.count == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut cov = if self.count >= 2 {
            self.comoment / (self.count - 1) as f64
        } else {
            SMatrix::zeros()
        };
        // Symmetrise away the rounding asymmetry of the rank-one updates.
        cov = (cov + cov.transpose()) * 0.5;
        if diagonal {
            cov = SMatrix::from_diagonal(&cov.diagonal());
        }
        let m = &self.mean;
        StainProfile::from_parts(
            ProfileParts {
                n_images: self.count as u64,
                od_base: config.od_base,
                stats_domain: config.stats_domain,
                mean_c: m.fixed_rows::<9>(0).into_owned(),
                cov_c: cov.fixed_view::<9, 9>(0, 0) + SMatrix::identity() * COV_EPSILON,
                mean_a: m.fixed_rows::<3>(9).into_owned(),
                cov_a: cov.fixed_view::<3, 3>(9, 9) + SMatrix::identity() * COV_EPSILON,
                mean_d: m.fixed_rows::<3>(12).into_owned(),
                cov_d: cov.fixed_view::<3, 3>(12, 12) + SMatrix::identity() * COV_EPSILON,
            },
            "fit",
        )
    }
}

/// Fits the profile to per-image statistics.
///
/// Inputs are accumulated in a canonical order, so the result does not
/// depend on the order of `stats`.
pub fn fit_profile(
    stats: &[ImageStainStats],
    config: &StainConfig,
    diagonal: bool,
) -> Result<StainProfile> {
    if stats.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut sorted: Vec<SVector<f64, 15>> = stats.iter().map(|s| s.as_vector()).collect();
    sorted.sort_by(|a, b| {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = ProfileAccumulator::default();
    for v in &sorted {
        let s = v.as_slice();
        acc.push(&ImageStainStats {
            c: s[..9].try_into().unwrap(),
            a: s[9..12].try_into().unwrap(),
            d: s[12..].try_into().unwrap(),
        });
    }
    acc.finish(config, diagonal)
}

/// A multivariate normal with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian<const N: usize> {
    mean: SVector<f64, N>,
    cov: SMatrix<f64, N, N>,
    chol: SMatrix<f64, N, N>,
}

impl<const N: usize> Gaussian<N> {
    fn new(mean: SVector<f64, N>, cov: SMatrix<f64, N, N>, field: &str) -> Result<Self> {
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::schema(field, "values must be finite"));
        }
        let asym = (cov - cov.transpose()).abs().max();
        if asym > 1e-12 {
            return Err(Error::schema(
                field,
                format!("covariance is not symmetric (max asymmetry {asym:e})"),
            ));
        }
        let chol = Cholesky::new(cov)
            .ok_or_else(|| Error::schema(field, "covariance is not positive definite"))?
            .l();
        Ok(Self { mean, cov, chol })
    }

    pub fn mean(&self) -> &SVector<f64, N> {
        &self.mean
    }

    pub fn cov(&self) -> &SMatrix<f64, N, N> {
        &self.cov
    }

    /// `mean + L z` with `z` drawn as N standard normals in index order.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> SVector<f64, N> {
        let z = SVector::<f64, N>::from_fn(|_, _| rng.sample(StandardNormal));
        self.mean + self.chol * z
    }
}

struct ProfileParts {
    n_images: u64,
    od_base: OdBase,
    stats_domain: StatsDomain,
    mean_c: SVector<f64, 9>,
    cov_c: SMatrix<f64, 9, 9>,
    mean_a: SVector<f64, 3>,
    cov_a: SMatrix<f64, 3, 3>,
    mean_d: SVector<f64, 3>,
    cov_d: SMatrix<f64, 3, 3>,
}

/// The fitted colour-matrix, concentration-mean and concentration-std
/// Gaussians of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StainProfile {
    n_images: u64,
    od_base: OdBase,
    stats_domain: StatsDomain,
    colour: Gaussian<9>,
    mean: Gaussian<3>,
    std: Gaussian<3>,
}

/// One draw from a profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledStain {
    pub c_prime: StainMatrix,
    pub a_prime: [f64; 3],
    pub d_prime: [f64; 3],
}

impl StainProfile {
    fn from_parts(p: ProfileParts, context: &str) -> Result<Self> {
        if p.n_images == 0 {
            return Err(Error::schema("n_images", "must be at least 1"));
        }
        let prefix = |f: &str| {
            if context == "fit" {
                f.to_string()
            } else {
                format!("{context}{f}")
            }
        };
        Ok(Self {
            n_images: p.n_images,
            od_base: p.od_base,
            stats_domain: p.stats_domain,
            colour: Gaussian::new(p.mean_c, p.cov_c, &prefix("cov_c"))?,
            mean: Gaussian::new(p.mean_a, p.cov_a, &prefix("cov_a"))?,
            std: Gaussian::new(p.mean_d, p.cov_d, &prefix("cov_d"))?,
        })
    }

    pub fn n_images(&self) -> u64 {
        self.n_images
    }

    pub fn od_base(&self) -> OdBase {
        self.od_base
    }

    pub fn stats_domain(&self) -> StatsDomain {
        self.stats_domain
    }

    pub fn colour(&self) -> &Gaussian<9> {
        &self.colour
    }

    pub fn concentration_mean(&self) -> &Gaussian<3> {
        &self.mean
    }

    pub fn concentration_std(&self) -> &Gaussian<3> {
        &self.std
    }

    /// Fails unless the profile was fitted under `config`'s conventions.
    pub fn check_conventions(&self, config: &StainConfig) -> Result<()> {
        if self.od_base != config.od_base {
            return Err(Error::ConventionMismatch {
                field: "od_base",
                profile: self.od_base.name().into(),
                config: config.od_base.name().into(),
            });
        }
        if self.stats_domain != config.stats_domain {
            return Err(Error::ConventionMismatch {
                field: "stats_domain",
                profile: self.stats_domain.name().into(),
                config: config.stats_domain.name().into(),
            });
        }
        Ok(())
    }

    /// Draws a colour matrix, renormalising columns and redrawing
    /// non-invertible samples.
    pub fn sample_colour<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StainMatrix> {
        for _ in 0..MAX_COLOUR_DRAWS {
            let v = self.colour.sample(rng);
            let values: [f64; 9] = v.as_slice().try_into().expect("9 values");
            if let Ok(m) = StainMatrix::from_row_major(&values) {
                return Ok(m);
            }
        }
        Err(Error::DegenerateSample {
            attempts: MAX_COLOUR_DRAWS,
        })
    }

    pub fn sample_mean<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        self.mean.sample(rng).into()
    }

    pub fn sample_std<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 3] {
        let d: [f64; 3] = self.std.sample(rng).into();
        d.map(|v| v.max(MIN_SAMPLED_STD))
    }

    /// Draws colour matrix, then means, then standard deviations.
    pub fn sample_stain<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SampledStain> {
        let c_prime = self.sample_colour(rng)?;
        let a_prime = self.sample_mean(rng);
        let d_prime = self.sample_std(rng);
        Ok(SampledStain {
            c_prime,
            a_prime,
            d_prime,
        })
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            schema_version: SCHEMA_VERSION,
            n_images: self.n_images,
            od_base: self.od_base,
            stats_domain: self.stats_domain,
            mean_c: self.colour.mean.iter().copied().collect(),
            cov_c: row_major(&self.colour.cov),
            mean_a: self.mean.mean.iter().copied().collect(),
            cov_a: row_major(&self.mean.cov),
            mean_d: self.std.mean.iter().copied().collect(),
            cov_d: row_major(&self.std.cov),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("profile serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::schema("<document>", e.to_string()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(Error::schema(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ))
            }
            None => return Err(Error::schema("schema_version", "missing or not an integer")),
        }
        let file: ProfileFile =
            serde_json::from_value(value).map_err(|e| Error::schema("<document>", e.to_string()))?;
        StainProfile::from_parts(
            ProfileParts {
                n_images: file.n_images,
                od_base: file.od_base,
                stats_domain: file.stats_domain,
                mean_c: SVector::from_column_slice(&exact_len(&file.mean_c, 9, "mean_c")?),
                cov_c: SMatrix::from_row_slice(&exact_len(&file.cov_c, 81, "cov_c")?),
                mean_a: SVector::from_column_slice(&exact_len(&file.mean_a, 3, "mean_a")?),
                cov_a: SMatrix::from_row_slice(&exact_len(&file.cov_a, 9, "cov_a")?),
                mean_d: SVector::from_column_slice(&exact_len(&file.mean_d, 3, "mean_d")?),
                cov_d: SMatrix::from_row_slice(&exact_len(&file.cov_d, 9, "cov_d")?),
            },
            "",
        )
    }
}

fn row_major<const N: usize>(m: &SMatrix<f64, N, N>) -> Vec<f64> {
    (0..N).flat_map(|i| (0..N).map(move |j| m[(i, j)])).collect()
}

fn exact_len(values: &[f64], n: usize, field: &str) -> Result<Vec<f64>> {
    if values.len() != n {
        return Err(Error::schema(
            field,
            format!("expected {n} values, found {}", values.len()),
        ));
    }
    Ok(values.to_vec())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    schema_version: u32,
    n_images: u64,
    od_base: OdBase,
    stats_domain: StatsDomain,
    mean_c: Vec<f64>,
    cov_c: Vec<f64>,
    mean_a: Vec<f64>,
    cov_a: Vec<f64>,
    mean_d: Vec<f64>,
    cov_d: Vec<f64>,
}

pub fn save_profile(profile: &StainProfile, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), profile.to_json().as_bytes())
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<StainProfile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    StainProfile::from_json(&text)
}

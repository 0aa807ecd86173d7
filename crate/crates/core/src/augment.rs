//! Stain augmentation: stain consistency augmentation (SCA), paired variants
//! for the consistency loss, Stain Jitter and RandStainNA (lαβ).
//!
//! Each augmenter has a float variant returning the pre-quantisation result,
//! so invariants can be checked before 8-bit rounding hides them.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{od_to_intensity, quantize, rgb_to_od, tissue_mask, OdBase, RgbImage};
use crate::lab::{image_to_lab, lab_stats, restandardise};
use crate::profile::{separate, SampledStain, Separation, StainConfig, StainProfile};
use crate::separation::{
    compute_concentrations, estimate_stain_matrix, recompose_unclamped, solve_pixels,
    ChannelStats, ConcentrationMap, StainMatrix,
};
use crate::stats::RunningStats;

/// Guard for standard deviations used as divisors.
const MIN_STD: f64 = 1e-8;

/// Which way the concentration re-standardisation maps statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum RestandardiseDirection {
    /// `s' = (d_x / d') (s - a') + a_x`
    #[default]
    Printed,
    /// `s' = (d' / d_x) (s - a_x) + a'`
    Conventional,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AugmentConfig {
    pub stain: StainConfig,
    pub direction: RestandardiseDirection,
}

fn ratio(num: f64, den: f64) -> f64 {
    if num == den {
        1.0
    } else {
        num / den.max(MIN_STD)
    }
}

/// Re-standardises every concentration channel from the image's own
/// statistics towards sampled ones, clamping the result at zero.
pub fn transform_concentrations(
    s: &ConcentrationMap,
    own: &ChannelStats,
    target_mean: &[f64; 3],
    target_std: &[f64; 3],
    direction: RestandardiseDirection,
) -> ConcentrationMap {
    let (scale, shift_in, shift_out): ([f64; 3], [f64; 3], [f64; 3]) = match direction {
        RestandardiseDirection::Printed => (
            std::array::from_fn(|k| ratio(own.std[k], target_std[k])),
            *target_mean,
            own.mean,
        ),
        RestandardiseDirection::Conventional => (
            std::array::from_fn(|k| ratio(target_std[k], own.std[k])),
            own.mean,
            *target_mean,
        ),
    };
    s.map_clamped(|k, v| scale[k] * (v - shift_in[k]) + shift_out[k])
}

/// A pre-quantisation augmentation result.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB on the 0..255 scale, not clamped.
    pub rgb: Vec<f64>,
}

impl FloatImage {
    pub fn to_rgb(&self) -> RgbImage {
        RgbImage::new(
            self.height,
            self.width,
            self.rgb.iter().map(|&v| quantize(v)).collect(),
        )
        .expect("dimensions carried from a valid image")
    }
}

/// A stain-space augmentation before quantisation: the colour matrix and
/// concentrations that produced it, and the rendered float RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct StainRender {
    pub colour: StainMatrix,
    pub concentrations: ConcentrationMap,
    pub od_base: OdBase,
    pub image: FloatImage,
}

impl StainRender {
    fn new(colour: StainMatrix, concentrations: ConcentrationMap, od_base: OdBase) -> Self {
        let rgb = recompose_unclamped(&colour, &concentrations)
            .into_iter()
            .map(|od| od_to_intensity(od, od_base))
            .collect();
        let image = FloatImage {
            height: concentrations.height(),
            width: concentrations.width(),
            rgb,
        };
        Self {
            colour,
            concentrations,
            od_base,
            image,
        }
    }

    pub fn to_rgb(&self) -> RgbImage {
        self.image.to_rgb()
    }

    /// Converts the float RGB back to OD and solves against this render's
    /// colour matrix.
    pub fn recovered_concentrations(&self) -> Result<ConcentrationMap> {
        let od: Vec<f64> = self
            .image
            .rgb
            .iter()
            .map(|&v| {
                let t = v / 255.0;
                match self.od_base {
                    OdBase::Ten => -t.log10(),
                    OdBase::E => -t.ln(),
                }
            })
            .collect();
        let s = solve_pixels(&od, &self.colour)?
            .into_iter()
            .map(|v| v.max(0.0))
            .collect();
        ConcentrationMap::new(self.image.height, self.image.width, s)
    }
}

/// SCA with an explicit draw, on an already separated image.
pub fn sca_apply(sep: &Separation, sampled: &SampledStain, config: &AugmentConfig) -> StainRender {
    let s = transform_concentrations(
        &sep.concentrations,
        &sep.stats,
        &sampled.a_prime,
        &sampled.d_prime,
        config.direction,
    );
    StainRender::new(sampled.c_prime, s, config.stain.od_base)
}

pub fn sca_augment_float<R: Rng + ?Sized>(
    img: &RgbImage,
    profile: &StainProfile,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<StainRender> {
    profile.check_conventions(&config.stain)?;
    let sep = separate(img, &config.stain)?;
    let sampled = profile.sample_stain(rng)?;
    Ok(sca_apply(&sep, &sampled, config))
}

/// Stain consistency augmentation: the image's colour matrix is replaced by a
/// sampled one and its concentrations re-standardised with sampled
/// statistics.
pub fn sca_augment<R: Rng + ?Sized>(
    img: &RgbImage,
    profile: &StainProfile,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<RgbImage> {
    Ok(sca_augment_float(img, profile, config, rng)?.to_rgb())
}

/// Two augmented variants sharing one concentration transform.
#[derive(Debug, Clone, PartialEq)]
pub struct SclPair {
    pub image_a: RgbImage,
    pub image_b: RgbImage,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SclRenders {
    pub a: StainRender,
    pub b: StainRender,
}

impl SclRenders {
    pub fn to_pair(&self) -> SclPair {
        SclPair {
            image_a: self.a.to_rgb(),
            image_b: self.b.to_rgb(),
        }
    }

    /// Largest element-wise difference between the concentrations recovered
    /// from each member against its own colour matrix.
    pub fn concentration_discrepancy(&self) -> Result<f64> {
        let a = self.a.recovered_concentrations()?;
        let b = self.b.recovered_concentrations()?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max))
    }
}

/// Draws means, standard deviations and two colour matrices, in that order.
pub fn scl_pair_float<R: Rng + ?Sized>(
    img: &RgbImage,
    profile: &StainProfile,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SclRenders> {
    profile.check_conventions(&config.stain)?;
    let sep = separate(img, &config.stain)?;
    let a_prime = profile.sample_mean(rng);
    let d_prime = profile.sample_std(rng);
    let colour_a = profile.sample_colour(rng)?;
    let colour_b = profile.sample_colour(rng)?;
    let s = transform_concentrations(
        &sep.concentrations,
        &sep.stats,
        &a_prime,
        &d_prime,
        config.direction,
    );
    Ok(SclRenders {
        a: StainRender::new(colour_a, s.clone(), config.stain.od_base),
        b: StainRender::new(colour_b, s, config.stain.od_base),
    })
}

pub fn scl_pair<R: Rng + ?Sized>(
    img: &RgbImage,
    profile: &StainProfile,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<SclPair> {
    Ok(scl_pair_float(img, profile, config, rng)?.to_pair())
}

/// Stain Jitter strength: scale in `[1 - alpha, 1 + alpha]`, shift in
/// `[-beta, beta]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            beta: 0.05,
        }
    }
}

impl JitterParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let p = Self { alpha, beta };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite() && self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "jitter alpha and beta must be finite and >= 0, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }

    /// Per channel: scale, then shift.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> JitterDraw {
        let mut scale = [1.0; 3];
        let mut shift = [0.0; 3];
        for k in 0..3 {
            scale[k] = rng.random_range(1.0 - self.alpha..=1.0 + self.alpha);
            shift[k] = rng.random_range(-self.beta..=self.beta);
        }
        JitterDraw { scale, shift }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraw {
    pub scale: [f64; 3],
    pub shift: [f64; 3],
}

/// Colour matrix used to separate stains for jitter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum)]
pub enum JitterMatrix {
    #[default]
    PerImage,
    /// Reference H&E vectors with a cross-product residual.
    Fixed,
}

pub fn stain_jitter_float<R: Rng + ?Sized>(
    img: &RgbImage,
    params: &JitterParams,
    matrix: JitterMatrix,
    config: &StainConfig,
    rng: &mut R,
) -> Result<StainRender> {
    params.validate()?;
    let od = rgb_to_od(img);
    let colour = match matrix {
        JitterMatrix::PerImage => {
            let mask = tissue_mask(&od, config.tissue_threshold)?;
            estimate_stain_matrix(&od, &mask, config.angle_percentile)?
        }
        JitterMatrix::Fixed => crate::synth::he_matrix(),
    };
    let s = compute_concentrations(&od, &colour)?;
    let draw = params.draw(rng);
    let s = s.map_clamped(|k, v| draw.scale[k] * v + draw.shift[k]);
    Ok(StainRender::new(colour, s, config.od_base))
}

pub fn stain_jitter<R: Rng + ?Sized>(
    img: &RgbImage,
    params: &JitterParams,
    matrix: JitterMatrix,
    config: &StainConfig,
    rng: &mut R,
) -> Result<RgbImage> {
    Ok(stain_jitter_float(img, params, matrix, config, rng)?.to_rgb())
}

/// A scalar normal; `var` already includes the ridge.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalarGaussian {
    pub mean: f64,
    pub var: f64,
}

impl ScalarGaussian {
    pub fn std(&self) -> f64 {
        self.var.max(0.0).sqrt()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let z: f64 = rng.sample(StandardNormal);
        self.mean + self.std() * z
    }
}

/// Per lαβ channel: a Gaussian over image means and one over image standard
/// deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct LabProfile {
    pub n_images: u64,
    pub means: [ScalarGaussian; 3],
    pub stds: [ScalarGaussian; 3],
}

/// Image-level lαβ channel statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabImageStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub fn lab_image_stats(img: &RgbImage) -> LabImageStats {
    let (mean, std) = lab_stats(&image_to_lab(img));
    LabImageStats { mean, std }
}

/// Fits scalar Gaussians (divisor n - 1, ridge 1e-8) in a canonical input
/// order.
pub fn fit_lab_profile_from_stats(stats: &[LabImageStats]) -> Result<LabProfile> {
    if stats.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows: Vec<[f64; 6]> = stats
        .iter()
        .map(|s| [s.mean[0], s.mean[1], s.mean[2], s.std[0], s.std[1], s.std[2]])
        .collect();
    rows.sort_by(|a, b| {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut acc = [RunningStats::default(); 6];
    for r in &rows {
        for (a, v) in acc.iter_mut().zip(r) {
            a.push(*v);
        }
    }
    let g = |k: usize| ScalarGaussian {
        mean: acc[k].mean(),
        var: acc[k].sample_variance() + crate::profile::COV_EPSILON,
    };
    Ok(LabProfile {
        n_images: stats.len() as u64,
        means: [g(0), g(1), g(2)],
        stds: [g(3), g(4), g(5)],
    })
}

pub fn fit_lab_profile(images: &[RgbImage]) -> Result<LabProfile> {
    let stats: Vec<_> = images.iter().map(lab_image_stats).collect();
    fit_lab_profile_from_stats(&stats)
}

/// Target lαβ statistics for one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabTarget {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl LabProfile {
    /// Draws the three channel means, then the three standard deviations
    /// (clamped at zero).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> LabTarget {
        let mean = std::array::from_fn(|k| self.means[k].sample(rng));
        let std = std::array::from_fn(|k| self.stds[k].sample(rng).max(0.0));
        LabTarget { mean, std }
    }

    pub fn to_json(&self) -> String {
        let file = LabProfileFile {
            schema_version: crate::profile::SCHEMA_VERSION,
            kind: "lab".into(),
            n_images: self.n_images,
            means: self.means.to_vec(),
            stds: self.stds.to_vec(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("profile serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: LabProfileFile = serde_json::from_str(text)
            .map_err(|e| Error::schema("<document>", e.to_string()))?;
        if file.schema_version != crate::profile::SCHEMA_VERSION {
            return Err(Error::schema(
                "schema_version",
                format!("unsupported version {}", file.schema_version),
            ));
        }
        if file.kind != "lab" {
            return Err(Error::schema("kind", format!("expected \"lab\", found {:?}", file.kind)));
        }
        if file.n_images == 0 {
            return Err(Error::schema("n_images", "must be at least 1"));
        }
        let three = |v: &[ScalarGaussian], field: &str| -> Result<[ScalarGaussian; 3]> {
            let arr: [ScalarGaussian; 3] = v
                .try_into()
                .map_err(|_| Error::schema(field, format!("expected 3 entries, found {}", v.len())))?;
            if arr.iter().any(|g| !g.mean.is_finite() || !(g.var >= 0.0) || !g.var.is_finite()) {
                return Err(Error::schema(field, "means must be finite and variances >= 0"));
            }
            Ok(arr)
        };
        Ok(Self {
            n_images: file.n_images,
            means: three(&file.means, "means")?,
            stds: three(&file.stds, "stds")?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabProfileFile {
    schema_version: u32,
    kind: String,
    n_images: u64,
    means: Vec<ScalarGaussian>,
    stds: Vec<ScalarGaussian>,
}

pub fn save_lab_profile(profile: &LabProfile, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), profile.to_json().as_bytes())
}

pub fn load_lab_profile(path: impl AsRef<Path>) -> Result<LabProfile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    LabProfile::from_json(&text)
}

/// Re-standardises the image's lαβ channels to `target`.
pub fn randstainna_apply(img: &RgbImage, target: &LabTarget) -> FloatImage {
    let lab = image_to_lab(img);
    let own = lab_stats(&lab);
    FloatImage {
        height: img.height(),
        width: img.width(),
        rgb: restandardise(&lab, own, (target.mean, target.std)),
    }
}

pub fn randstainna_augment<R: Rng + ?Sized>(
    img: &RgbImage,
    profile: &LabProfile,
    rng: &mut R,
) -> RgbImage {
    randstainna_apply(img, &profile.sample(rng)).to_rgb()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profile::{extract_image_stats, fit_profile};
    use crate::seed::task_rng;
    use crate::synth;

    fn tile(seed: u64) -> RgbImage {
        let mut rng = task_rng(seed, 0, 0);
        let c = synth::perturbed_he_matrix(&mut rng, 0.05);
        synth::synthetic_tile(&mut rng, 64, 64, &c)
    }

    fn profile() -> StainProfile {
        let stats: Vec<_> = synth::corpus(5, 12, 64)
            .iter()
            .map(|img| extract_image_stats(img, &StainConfig::default()).unwrap())
            .collect();
        fit_profile(&stats, &StainConfig::default(), false).unwrap()
    }

    fn within_levels(a: &RgbImage, b: &RgbImage, mask: &[bool], levels: u8) -> f64 {
        let mut ok = 0;
        let mut n = 0;
        for ((p, q), m) in a.pixels().zip(b.pixels()).zip(mask) {
            if *m {
                n += 1;
                if (0..3).all(|k| p[k].abs_diff(q[k]) <= levels) {
                    ok += 1;
                }
            }
        }
        ok as f64 / n as f64
    }

    #[test]
    fn pinned_identity_under_both_directions() {
        let s = ConcentrationMap::new(1, 3, vec![0.1, 0.5, 0.0, 0.9, 0.2, 0.01, 0.4, 0.0, 0.0]).unwrap();
        let own = ChannelStats {
            mean: [0.3, 0.2, 0.0],
            std: [0.2, 0.0, 0.004],
        };
        for dir in [RestandardiseDirection::Printed, RestandardiseDirection::Conventional] {
            let out = transform_concentrations(&s, &own, &own.mean, &own.std, dir);
            for (g, w) in out.data().iter().zip(s.data()) {
                assert!((g - w).abs() <= 1e-15, "{dir:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn restandardise_formulas() {
        let s = ConcentrationMap::new(1, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let own = ChannelStats {
            mean: [0.5; 3],
            std: [0.2; 3],
        };
        let out = transform_concentrations(&s, &own, &[0.4; 3], &[0.1; 3], RestandardiseDirection::Printed);
        // (0.2 / 0.1) * (1.0 - 0.4) + 0.5 = 1.7
        assert!((out.data()[0] - 1.7).abs() < 1e-12);
        let out = transform_concentrations(&s, &own, &[0.4; 3], &[0.1; 3], RestandardiseDirection::Conventional);
        // (0.1 / 0.2) * (1.0 - 0.5) + 0.4 = 0.65
        assert!((out.data()[0] - 0.65).abs() < 1e-12);
        let out = transform_concentrations(&s, &own, &[5.0; 3], &[0.1; 3], RestandardiseDirection::Printed);
        assert_eq!(out.data()[0], 0.0, "negative results clamp to zero");
    }

    #[test]
    fn sca_with_own_statistics_is_identity() {
        let img = tile(1);
        let cfg = AugmentConfig::default();
        let sep = separate(&img, &cfg.stain).unwrap();
        let sampled = SampledStain {
            c_prime: sep.colour,
            a_prime: sep.stats.mean,
            d_prime: sep.stats.std,
        };
        let out = sca_apply(&sep, &sampled, &cfg).to_rgb();
        let frac = within_levels(&out, &img, sep.tissue.bits(), 2);
        assert!(frac >= 0.95, "{frac}");
    }

    #[test]
    fn sca_is_deterministic_and_varied() {
        let img = tile(2);
        let p = profile();
        let cfg = AugmentConfig::default();
        let a = sca_augment(&img, &p, &cfg, &mut task_rng(9, 0, 0)).unwrap();
        let b = sca_augment(&img, &p, &cfg, &mut task_rng(9, 0, 0)).unwrap();
        let c = sca_augment(&img, &p, &cfg, &mut task_rng(9, 0, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.dims(), img.dims());
    }

    #[test]
    fn sca_refuses_mismatched_profile() {
        let cfg = AugmentConfig {
            stain: StainConfig {
                od_base: OdBase::E,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = sca_augment(&tile(3), &profile(), &cfg, &mut task_rng(0, 0, 0)).unwrap_err();
        assert!(matches!(err, Error::ConventionMismatch { .. }));
    }

    #[test]
    fn sca_white_image_fails() {
        let white = RgbImage::filled(32, 32, [255; 3]).unwrap();
        let err = sca_augment(&white, &profile(), &AugmentConfig::default(), &mut task_rng(0, 0, 0));
        assert!(matches!(err, Err(Error::InsufficientTissue { .. })));
    }

    #[test]
    fn scl_pair_shares_concentrations() {
        let img = tile(4);
        let p = profile();
        let cfg = AugmentConfig::default();
        let renders = scl_pair_float(&img, &p, &cfg, &mut task_rng(1, 2, 3)).unwrap();
        assert!(renders.concentration_discrepancy().unwrap() < 1e-6);
        assert!((renders.a.colour.matrix() - renders.b.colour.matrix()).norm() > 0.0);
        let again = scl_pair(&img, &p, &cfg, &mut task_rng(1, 2, 3)).unwrap();
        assert_eq!(again, renders.to_pair());
    }

    #[test]
    fn scl_pair_shares_concentrations_with_base_e() {
        let stain = StainConfig {
            od_base: OdBase::E,
            ..Default::default()
        };
        let stats: Vec<_> = synth::corpus(6, 6, 48)
            .iter()
            .map(|img| extract_image_stats(img, &stain).unwrap())
            .collect();
        let p = fit_profile(&stats, &stain, false).unwrap();
        let cfg = AugmentConfig {
            stain,
            direction: RestandardiseDirection::Conventional,
        };
        let r = scl_pair_float(&tile(8), &p, &cfg, &mut task_rng(0, 0, 0)).unwrap();
        assert!(r.concentration_discrepancy().unwrap() < 1e-6);
    }

    #[test]
    fn jitter_identity_and_ranges() {
        let img = tile(5);
        let cfg = StainConfig::default();
        let zero = JitterParams::new(0.0, 0.0).unwrap();
        let out = stain_jitter(&img, &zero, JitterMatrix::PerImage, &cfg, &mut task_rng(0, 0, 0)).unwrap();
        let mask = tissue_mask(&rgb_to_od(&img), 0.15).unwrap();
        assert!(within_levels(&out, &img, mask.bits(), 2) >= 0.95);

        let p = JitterParams::default();
        let mut rng = task_rng(3, 0, 0);
        for _ in 0..1000 {
            let d = p.draw(&mut rng);
            for k in 0..3 {
                assert!((0.75..=1.25).contains(&d.scale[k]));
                assert!((-0.05..=0.05).contains(&d.shift[k]));
            }
        }
        let a = stain_jitter(&img, &p, JitterMatrix::Fixed, &cfg, &mut task_rng(4, 0, 0)).unwrap();
        let b = stain_jitter(&img, &p, JitterMatrix::Fixed, &cfg, &mut task_rng(4, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert!(JitterParams::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn randstainna_identity_and_zero_std() {
        let img = tile(6);
        let own = lab_image_stats(&img);
        let same = randstainna_apply(&img, &LabTarget { mean: own.mean, std: own.std }).to_rgb();
        for (p, q) in same.pixels().zip(img.pixels()) {
            for k in 0..3 {
                assert!(p[k].abs_diff(q[k]) <= 1);
            }
        }

        let flat = randstainna_apply(&img, &LabTarget { mean: [-0.5, 0.01, 0.02], std: [0.0; 3] });
        let first = &flat.rgb[..3];
        for p in flat.rgb.chunks_exact(3) {
            for k in 0..3 {
                assert!((p[k] - first[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn lab_profile_fitting() {
        let img = tile(7);
        let p = fit_lab_profile(&[img.clone(), img.clone(), img.clone()]).unwrap();
        for k in 0..3 {
            assert_eq!(p.means[k].var, crate::profile::COV_EPSILON);
            assert_eq!(p.stds[k].var, crate::profile::COV_EPSILON);
        }
        let lo = LabImageStats { mean: [0.0; 3], std: [0.0; 3] };
        let hi = LabImageStats { mean: [2.0; 3], std: [1.0; 3] };
        let p = fit_lab_profile_from_stats(&[lo, hi]).unwrap();
        assert_eq!(p.means[0].mean, 1.0);
        assert_eq!(p.means[0].var, 2.0 + 1e-8);
        assert_eq!(p.stds[2].var, 0.5 + 1e-8);
        assert_eq!(fit_lab_profile_from_stats(&[hi, lo]).unwrap(), p);
        assert!(matches!(fit_lab_profile(&[]), Err(Error::EmptyDataset)));

        let back = LabProfile::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        assert!(LabProfile::from_json(&p.to_json().replace("\"lab\"", "\"stain\"")).is_err());

        let a = randstainna_augment(&img, &p, &mut task_rng(1, 1, 1));
        let b = randstainna_augment(&img, &p, &mut task_rng(1, 1, 1));
        assert_eq!(a, b);
    }
}

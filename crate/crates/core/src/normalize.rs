//! Reference-based stain normalisation: Reinhard (lαβ), Macenko, per-channel
//! histogram matching and Fourier domain adaptation.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::augment::{FloatImage, StainRender};
use crate::error::{Error, Result};
use crate::imaging::{od_to_intensity, rgb_to_od, tissue_mask, RgbImage};
use crate::lab::{image_to_lab, lab_stats, restandardise};
use crate::profile::StainConfig;
use crate::separation::{
    compute_concentrations, estimate_stain_matrix, recompose_unclamped, ConcentrationMap,
    StainMatrix,
};
use crate::stats::percentile_in_place;

/// Percentile used as the robust concentration maximum.
pub const MACENKO_PERCENTILE: f64 = 99.0;

pub const DEFAULT_FDA_BETA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum NormMethod {
    Reinhard,
    Macenko,
    #[value(name = "hm")]
    Histogram,
    Fda,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConfig {
    pub stain: StainConfig,
    pub fda_beta: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self {
            stain: StainConfig::default(),
            fda_beta: DEFAULT_FDA_BETA,
        }
    }
}

/// Per-channel 8-bit histograms of a reference image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistogramReference {
    pub counts: [[u64; 256]; 3],
    pub total: u64,
}

impl HistogramReference {
    pub fn of(img: &RgbImage) -> Self {
        let mut counts = [[0u64; 256]; 3];
        for p in img.pixels() {
            for k in 0..3 {
                counts[k][p[k] as usize] += 1;
            }
        }
        Self {
            counts,
            total: img.pixel_count() as u64,
        }
    }

    /// Empirical CDF of channel `k`; the last entry is exactly 1.
    pub fn cdf(&self, k: usize) -> [f64; 256] {
        let mut out = [0.0; 256];
        let mut acc = 0u64;
        for (v, c) in self.counts[k].iter().enumerate() {
            acc += c;
            out[v] = acc as f64 / self.total as f64;
        }
        out
    }

    fn cumulative(&self, k: usize) -> [u64; 256] {
        let mut out = [0u64; 256];
        let mut acc = 0u64;
        for (v, c) in self.counts[k].iter().enumerate() {
            acc += c;
            out[v] = acc;
        }
        out
    }
}

/// Amplitude spectra of a reference image (unshifted FFT order).
#[derive(Debug, Clone, PartialEq)]
pub struct FdaReference {
    pub height: usize,
    pub width: usize,
    pub amplitude: [Vec<f64>; 3],
    pub beta: f64,
}

/// Precomputed statistics of a reference image for one method.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceTarget {
    Reinhard {
        lab_mean: [f64; 3],
        lab_std: [f64; 3],
    },
    Macenko {
        colour: StainMatrix,
        p99: [f64; 3],
    },
    Histogram(Box<HistogramReference>),
    Fda(FdaReference),
}

fn concentration_percentiles(s: &ConcentrationMap, p: f64) -> [f64; 3] {
    std::array::from_fn(|k| {
        let mut v: Vec<f64> = s.channel(k).collect();
        percentile_in_place(&mut v, p).expect("image is non-empty")
    })
}

fn own_separation(img: &RgbImage, config: &StainConfig) -> Result<(StainMatrix, ConcentrationMap)> {
    let od = rgb_to_od(img);
    let mask = tissue_mask(&od, config.tissue_threshold)?;
    let colour = estimate_stain_matrix(&od, &mask, config.angle_percentile)?;
    let s = compute_concentrations(&od, &colour)?;
    Ok((colour, s))
}

pub fn make_reference(img: &RgbImage, method: NormMethod, config: &NormConfig) -> Result<ReferenceTarget> {
    Ok(match method {
        NormMethod::Reinhard => {
            let (lab_mean, lab_std) = lab_stats(&image_to_lab(img));
            ReferenceTarget::Reinhard { lab_mean, lab_std }
        }
        NormMethod::Macenko => {
            let (colour, s) = own_separation(img, &config.stain)?;
            ReferenceTarget::Macenko {
                colour,
                p99: concentration_percentiles(&s, MACENKO_PERCENTILE),
            }
        }
        NormMethod::Histogram => ReferenceTarget::Histogram(Box::new(HistogramReference::of(img))),
        NormMethod::Fda => {
            check_beta(config.fda_beta)?;
            let (h, w) = img.dims();
            let amplitude = std::array::from_fn(|k| {
                let mut buf = channel_complex(img, k);
                fft2d(&mut buf, h, w, false);
                buf.iter().map(|c| c.norm()).collect()
            });
            ReferenceTarget::Fda(FdaReference {
                height: h,
                width: w,
                amplitude,
                beta: config.fda_beta,
            })
        }
    })
}

fn wrong_kind(expected: &str) -> Error {
    Error::InvalidParameter(format!("reference target is not a {expected} reference"))
}

pub fn reinhard_normalize_float(img: &RgbImage, reference: &ReferenceTarget) -> Result<FloatImage> {
    let ReferenceTarget::Reinhard { lab_mean, lab_std } = reference else {
        return Err(wrong_kind("Reinhard"));
    };
    let lab = image_to_lab(img);
    let own = lab_stats(&lab);
    Ok(FloatImage {
        height: img.height(),
        width: img.width(),
        rgb: restandardise(&lab, own, (*lab_mean, *lab_std)),
    })
}

/// Matches each lαβ channel's mean and standard deviation to the reference.
pub fn reinhard_normalize(img: &RgbImage, reference: &ReferenceTarget) -> Result<RgbImage> {
    Ok(reinhard_normalize_float(img, reference)?.to_rgb())
}

pub fn macenko_normalize_float(
    img: &RgbImage,
    reference: &ReferenceTarget,
    config: &StainConfig,
) -> Result<StainRender> {
    let ReferenceTarget::Macenko { colour, p99 } = reference else {
        return Err(wrong_kind("Macenko"));
    };
    let (_, s) = own_separation(img, config)?;
    let src = concentration_percentiles(&s, MACENKO_PERCENTILE);
    let scale: [f64; 3] = std::array::from_fn(|k| {
        if p99[k] == src[k] {
            1.0
        } else {
            p99[k] / src[k].max(1e-8)
        }
    });
    let s = s.map_clamped(|k, v| v * scale[k]);
    let rgb = recompose_unclamped(colour, &s)
        .into_iter()
        .map(|od| od_to_intensity(od, config.od_base))
        .collect();
    Ok(StainRender {
        colour: *colour,
        image: FloatImage {
            height: img.height(),
            width: img.width(),
            rgb,
        },
        concentrations: s,
        od_base: config.od_base,
    })
}

/// Separates with the image's own matrix, rescales each stain's 99th
/// percentile to the reference's, and recomposes with the reference matrix.
pub fn macenko_normalize(
    img: &RgbImage,
    reference: &ReferenceTarget,
    config: &StainConfig,
) -> Result<RgbImage> {
    Ok(macenko_normalize_float(img, reference, config)?.to_rgb())
}

/// The 256-entry lookup table of each channel.
pub fn histogram_mapping(img: &RgbImage, reference: &ReferenceTarget) -> Result<[[u8; 256]; 3]> {
    let ReferenceTarget::Histogram(target) = reference else {
        return Err(wrong_kind("histogram"));
    };
    let source = HistogramReference::of(img);
    let mut lut = [[0u8; 256]; 3];
    for k in 0..3 {
        let src = source.cumulative(k);
        let dst = target.cumulative(k);
        // Smallest u with G(u) >= F(v), compared as exact fractions.
        let mut u = 0usize;
        for v in 0..256 {
            let need = u128::from(src[v]) * u128::from(target.total);
            while u < 255 && u128::from(dst[u]) * u128::from(source.total) < need {
                u += 1;
            }
            lut[k][v] = u as u8;
        }
    }
    Ok(lut)
}

/// Classic per-channel CDF matching, `G^-1(F(v))`.
pub fn histogram_match(img: &RgbImage, reference: &ReferenceTarget) -> Result<RgbImage> {
    let lut = histogram_mapping(img, reference)?;
    let data = img
        .data()
        .chunks_exact(3)
        .flat_map(|p| [lut[0][p[0] as usize], lut[1][p[1] as usize], lut[2][p[2] as usize]])
        .collect();
    RgbImage::new(img.height(), img.width(), data)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&beta) {
        return Err(Error::InvalidParameter(format!(
            "FDA beta must be in [0, 0.5], got {beta}"
        )));
    }
    Ok(())
}

fn channel_complex(img: &RgbImage, k: usize) -> Vec<Complex64> {
    img.data()
        .iter()
        .skip(k)
        .step_by(3)
        .map(|&v| Complex64::new(v as f64, 0.0))
        .collect()
}

/// In-place 2-D FFT of a row-major `h x w` buffer. The inverse is scaled by
/// `1 / (h w)`.
pub(crate) fn fft2d(data: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    row_fft.process(data);
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    if inverse {
        let scale = 1.0 / (h * w) as f64;
        data.iter_mut().for_each(|c| *c *= scale);
    }
}

/// Centred offset of frequency index `k` in an `n`-point spectrum, i.e. its
/// position relative to DC after an fftshift.
fn centred_offset(k: usize, n: usize) -> isize {
    let k = k as isize;
    let n = n as isize;
    if k >= n - n / 2 {
        k - n
    } else {
        k
    }
}

/// Frequency index in an `n`-point spectrum for a centred offset, if the
/// shifted spectrum contains it.
fn index_for_offset(offset: isize, n: usize) -> Option<usize> {
    let n = n as isize;
    let lo = -(n / 2);
    let hi = n - n / 2 - 1;
    (lo..=hi)
        .contains(&offset)
        .then(|| offset.rem_euclid(n) as usize)
}

/// FDA before clamping: returns per-channel real parts of the inverse FFT.
pub fn fda_transfer_float(img: &RgbImage, reference: &ReferenceTarget, beta: f64) -> Result<FloatImage> {
    let ReferenceTarget::Fda(target) = reference else {
        return Err(wrong_kind("FDA"));
    };
    check_beta(beta)?;
    let (h, w) = img.dims();
    let half = (beta * h.min(w) as f64).floor() as isize;

    // Source index -> reference index for every frequency inside the window.
    let mut window = Vec::new();
    if beta > 0.0 {
        for ky in 0..h {
            let dy = centred_offset(ky, h);
            if dy.abs() > half {
                continue;
            }
            for kx in 0..w {
                let dx = centred_offset(kx, w);
                if dx.abs() > half {
                    continue;
                }
                match (index_for_offset(dy, target.height), index_for_offset(dx, target.width)) {
                    (Some(ry), Some(rx)) => window.push((ky * w + kx, ry * target.width + rx)),
                    _ => {
                        return Err(Error::ShapeMismatch {
                            expected: (target.height, target.width),
                            found: (h, w),
                        })
                    }
                }
            }
        }
    }

    let mut rgb = vec![0.0; h * w * 3];
    for k in 0..3 {
        let mut buf = channel_complex(img, k);
        if !window.is_empty() {
            fft2d(&mut buf, h, w, false);
            for &(src, dst) in &window {
                let phase = buf[src].arg();
                buf[src] = Complex64::from_polar(target.amplitude[k][dst], phase);
            }
            fft2d(&mut buf, h, w, true);
        }
        for (i, c) in buf.iter().enumerate() {
            rgb[i * 3 + k] = c.re;
        }
    }
    Ok(FloatImage {
        height: h,
        width: w,
        rgb,
    })
}

/// Replaces the low-frequency amplitude spectrum (centred square of half-width
/// `floor(beta * min(H, W))`) with the reference's, keeping the source phase.
/// `beta = 0` leaves the image unchanged.
pub fn fda_transfer(img: &RgbImage, reference: &ReferenceTarget, beta: f64) -> Result<RgbImage> {
    Ok(fda_transfer_float(img, reference, beta)?.to_rgb())
}

/// Dispatches on the reference kind; FDA uses the reference's own beta.
pub fn normalize(img: &RgbImage, reference: &ReferenceTarget, config: &StainConfig) -> Result<RgbImage> {
    match reference {
        ReferenceTarget::Reinhard { .. } => reinhard_normalize(img, reference),
        ReferenceTarget::Macenko { .. } => macenko_normalize(img, reference, config),
        ReferenceTarget::Histogram(_) => histogram_match(img, reference),
        ReferenceTarget::Fda(f) => fda_transfer(img, reference, f.beta),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::task_rng;
    use crate::synth;

    fn tile(seed: u64, size: usize) -> RgbImage {
        let mut rng = task_rng(seed, 0, 0);
        let c = synth::perturbed_he_matrix(&mut rng, 0.08);
        synth::synthetic_tile(&mut rng, size, size, &c)
    }

    fn max_diff(a: &RgbImage, b: &RgbImage) -> u8 {
        a.data().iter().zip(b.data()).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
    }

    fn cfg() -> NormConfig {
        NormConfig::default()
    }

    #[test]
    fn reinhard_self_identity_and_moments() {
        let img = tile(1, 48);
        let r = make_reference(&img, NormMethod::Reinhard, &cfg()).unwrap();
        assert!(max_diff(&reinhard_normalize(&img, &r).unwrap(), &img) <= 1);

        let other = tile(2, 48);
        let out = reinhard_normalize_float(&other, &r).unwrap();
        let lab: Vec<[f64; 3]> = out
            .rgb
            .chunks_exact(3)
            .map(|p| crate::lab::rgb_to_lab([p[0], p[1], p[2]]))
            .collect();
        let (mean, _) = lab_stats(&lab);
        let ReferenceTarget::Reinhard { lab_mean, .. } = r else { unreachable!() };
        for k in 0..3 {
            assert!((mean[k] - lab_mean[k]).abs() < 1e-3, "{k}: {} vs {}", mean[k], lab_mean[k]);
        }
    }

    #[test]
    fn reinhard_constant_source() {
        let flat = RgbImage::filled(8, 8, [200, 120, 180]).unwrap();
        let r = make_reference(&flat, NormMethod::Reinhard, &cfg()).unwrap();
        assert!(matches!(r, ReferenceTarget::Reinhard { lab_std, .. } if lab_std == [0.0; 3]));

        let reference = tile(3, 32);
        let rr = make_reference(&reference, NormMethod::Reinhard, &cfg()).unwrap();
        let out = reinhard_normalize(&flat, &rr).unwrap();
        let first = out.pixel(0, 0);
        assert!(out.pixels().all(|p| p == first));
        let ReferenceTarget::Reinhard { lab_mean, .. } = rr else { unreachable!() };
        let expected = crate::lab::lab_to_rgb(lab_mean).map(crate::imaging::quantize);
        assert_eq!(first, expected);
    }

    #[test]
    fn macenko_self_identity() {
        let img = tile(4, 64);
        let r = make_reference(&img, NormMethod::Macenko, &cfg()).unwrap();
        let out = macenko_normalize(&img, &r, &cfg().stain).unwrap();
        let mask = tissue_mask(&rgb_to_od(&img), 0.15).unwrap();
        let close = out
            .pixels()
            .zip(img.pixels())
            .zip(mask.bits())
            .filter(|(_, m)| **m)
            .filter(|((p, q), _)| (0..3).all(|k| p[k].abs_diff(q[k]) <= 2))
            .count();
        assert!(close as f64 >= 0.95 * mask.count() as f64);
        assert_eq!(macenko_normalize(&img, &r, &cfg().stain).unwrap(), out);
    }

    #[test]
    fn macenko_output_percentiles_match_reference() {
        let r = make_reference(&tile(5, 64), NormMethod::Macenko, &cfg()).unwrap();
        let out = macenko_normalize_float(&tile(6, 64), &r, &cfg().stain).unwrap();
        let recovered = out.recovered_concentrations().unwrap();
        let got = concentration_percentiles(&recovered, 99.0);
        let ReferenceTarget::Macenko { p99, .. } = r else { unreachable!() };
        for k in 0..2 {
            assert!((got[k] - p99[k]).abs() <= 0.01 * p99[k], "{k}: {} vs {}", got[k], p99[k]);
        }
    }

    #[test]
    fn macenko_reference_percentile_matches_sort() {
        let img = tile(7, 40);
        let r = make_reference(&img, NormMethod::Macenko, &cfg()).unwrap();
        let ReferenceTarget::Macenko { colour, p99 } = r else { unreachable!() };
        let s = compute_concentrations(&rgb_to_od(&img), &colour).unwrap();
        for k in 0..3 {
            let mut v: Vec<f64> = s.channel(k).collect();
            v.sort_by(f64::total_cmp);
            let rank = 0.99 * (v.len() - 1) as f64;
            let lo = rank.floor() as usize;
            let want = v[lo] + (rank - lo as f64) * (v[lo + 1] - v[lo]);
            assert!((p99[k] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn histogram_self_identity() {
        let img = tile(8, 40);
        let r = make_reference(&img, NormMethod::Histogram, &cfg()).unwrap();
        assert_eq!(histogram_match(&img, &r).unwrap(), img);
        let ReferenceTarget::Histogram(h) = &r else { unreachable!() };
        for k in 0..3 {
            assert_eq!(h.cdf(k)[255], 1.0);
            assert!(h.cdf(k).windows(2).all(|w| w[0] <= w[1]));
        }
    }

    /// Brute force: scan every reference value for the smallest whose CDF
    /// reaches the source CDF.
    fn brute_mapping(src: &RgbImage, reference: &RgbImage, k: usize) -> [u8; 256] {
        let cdf = |img: &RgbImage, v: usize| {
            img.pixels().filter(|p| (p[k] as usize) <= v).count() as f64 / img.pixel_count() as f64
        };
        let mut out = [0u8; 256];
        for v in 0..256 {
            let f = cdf(src, v);
            out[v] = (0..256).find(|&u| cdf(reference, u) >= f - 1e-12).unwrap() as u8;
        }
        out
    }

    #[test]
    fn histogram_two_level_to_uniform() {
        let two = RgbImage::from_fn(16, 16, |y, _| if y < 8 { [0; 3] } else { [255; 3] }).unwrap();
        let uniform = RgbImage::from_fn(16, 16, |y, x| [(y * 16 + x) as u8; 3]).unwrap();
        let r = make_reference(&uniform, NormMethod::Histogram, &cfg()).unwrap();
        let lut = histogram_mapping(&two, &r).unwrap();
        for k in 0..3 {
            assert_eq!(lut[k], brute_mapping(&two, &uniform, k));
        }
        assert_eq!(lut[0][0], 127);
        assert_eq!(lut[0][255], 255);
        let out = histogram_match(&two, &r).unwrap();
        assert!(out.pixels().all(|p| p == [127; 3] || p == [255; 3]));
    }

    fn emd(a: &RgbImage, b: &RgbImage, k: usize) -> f64 {
        let ha = HistogramReference::of(a).cdf(k);
        let hb = HistogramReference::of(b).cdf(k);
        ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum()
    }

    #[test]
    fn histogram_reduces_emd_and_uses_reference_values() {
        let src = tile(9, 40);
        let reference = tile(10, 32);
        let r = make_reference(&reference, NormMethod::Histogram, &cfg()).unwrap();
        let out = histogram_match(&src, &r).unwrap();
        let rh = HistogramReference::of(&reference);
        for k in 0..3 {
            assert!(emd(&out, &reference, k) <= emd(&src, &reference, k));
            for p in out.pixels() {
                assert!(rh.counts[k][p[k] as usize] > 0);
            }
        }
        let lut = histogram_mapping(&src, &r).unwrap();
        for k in 0..3 {
            assert_eq!(lut[k], brute_mapping(&src, &reference, k));
        }
    }

    #[test]
    fn fda_beta_zero_and_self() {
        let img = tile(11, 32);
        let other = tile(12, 32);
        let r = make_reference(&other, NormMethod::Fda, &cfg()).unwrap();
        assert!(max_diff(&fda_transfer(&img, &r, 0.0).unwrap(), &img) <= 1);
        let own = make_reference(&img, NormMethod::Fda, &cfg()).unwrap();
        for beta in [0.0, 0.01, 0.1, 0.3, 0.5] {
            assert!(max_diff(&fda_transfer(&img, &own, beta).unwrap(), &img) <= 1, "beta {beta}");
        }
    }

    #[test]
    fn fda_full_window_takes_reference_amplitude() {
        for size in [16usize, 15] {
            let img = tile(13, size);
            let other = tile(14, size);
            let r = make_reference(&other, NormMethod::Fda, &cfg()).unwrap();
            let out = fda_transfer_float(&img, &r, 0.5).unwrap();
            let ReferenceTarget::Fda(target) = &r else { unreachable!() };
            for k in 0..3 {
                let mut buf: Vec<Complex64> = out.rgb.iter().skip(k).step_by(3).map(|&v| Complex64::new(v, 0.0)).collect();
                fft2d(&mut buf, size, size, false);
                for (c, a) in buf.iter().zip(&target.amplitude[k]) {
                    assert!((c.norm() - a).abs() < 1e-6, "{} vs {a}", c.norm());
                }
            }
        }
    }

    #[test]
    fn fda_dimension_handling() {
        let small = tile(15, 16);
        let big = tile(16, 64);
        // Reference larger than source: the centred window is cropped.
        let r = make_reference(&big, NormMethod::Fda, &cfg()).unwrap();
        assert!(fda_transfer(&small, &r, 0.5).is_ok());
        // Reference smaller than the source window: no data to take.
        let r = make_reference(&small, NormMethod::Fda, &cfg()).unwrap();
        assert!(matches!(fda_transfer(&big, &r, 0.3), Err(Error::ShapeMismatch { .. })));
        assert!(fda_transfer(&big, &r, 0.05).is_ok());
        assert!(fda_transfer(&big, &r, 0.6).is_err());
    }

    #[test]
    fn wrong_reference_kind() {
        let img = tile(17, 16);
        let r = make_reference(&img, NormMethod::Histogram, &cfg()).unwrap();
        assert!(reinhard_normalize(&img, &r).is_err());
        assert!(fda_transfer(&img, &r, 0.1).is_err());
    }
}

//! Ruderman lαβ opponent colour space, shared by Reinhard normalisation and
//! RandStainNA augmentation.

use std::sync::OnceLock;

use nalgebra::{Matrix3, Vector3};

use crate::imaging::RgbImage;
use crate::stats::RunningStats;

const RGB_TO_LMS: [f64; 9] = [
    0.3811, 0.5783, 0.0402, //
    0.1967, 0.7244, 0.0782, //
    0.0241, 0.1288, 0.8444,
];

/// LMS floor before the logarithm (RGB scaled to [0, 1]).
const LMS_FLOOR: f64 = 1e-6;

struct Transforms {
    rgb_to_lms: Matrix3<f64>,
    lms_to_rgb: Matrix3<f64>,
    log_to_lab: Matrix3<f64>,
    lab_to_log: Matrix3<f64>,
}

fn transforms() -> &'static Transforms {
    static T: OnceLock<Transforms> = OnceLock::new();
    T.get_or_init(|| {
        let rgb_to_lms = Matrix3::from_row_slice(&RGB_TO_LMS);
        let s3 = 1.0 / 3f64.sqrt();
        let s6 = 1.0 / 6f64.sqrt();
        let s2 = 1.0 / 2f64.sqrt();
        let log_to_lab = Matrix3::new(
            s3, s3, s3, //
            s6, s6, -2.0 * s6, //
            s2, -s2, 0.0,
        );
        Transforms {
            lms_to_rgb: rgb_to_lms.try_inverse().expect("invertible"),
            lab_to_log: log_to_lab.try_inverse().expect("invertible"),
            rgb_to_lms,
            log_to_lab,
        }
    })
}

/// 8-bit-scale RGB to lαβ.
pub fn rgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let t = transforms();
    let lms = t.rgb_to_lms * (Vector3::from(rgb) / 255.0);
    let log = lms.map(|v| v.max(LMS_FLOOR).log10());
    (t.log_to_lab * log).into()
}

/// lαβ to unclamped 8-bit-scale RGB.
pub fn lab_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let t = transforms();
    let log = t.lab_to_log * Vector3::from(lab);
    let lms = log.map(|v| (v * std::f64::consts::LN_10).exp());
    (t.lms_to_rgb * lms * 255.0).into()
}

pub fn image_to_lab(img: &RgbImage) -> Vec<[f64; 3]> {
    img.pixels()
        .map(|p| rgb_to_lab([p[0] as f64, p[1] as f64, p[2] as f64]))
        .collect()
}

/// Per-channel mean and population standard deviation.
pub fn lab_stats(lab: &[[f64; 3]]) -> ([f64; 3], [f64; 3]) {
    let mut acc = [RunningStats::default(); 3];
    for p in lab {
        for (a, v) in acc.iter_mut().zip(p) {
            a.push(*v);
        }
    }
    (acc.map(|a| a.mean()), acc.map(|a| a.population_std()))
}

/// Re-standardises every channel from `(src_mean, src_std)` to
/// `(dst_mean, dst_std)` and returns unclamped float RGB, interleaved.
pub fn restandardise(
    lab: &[[f64; 3]],
    src: ([f64; 3], [f64; 3]),
    dst: ([f64; 3], [f64; 3]),
) -> Vec<f64> {
    let scale: [f64; 3] =
        std::array::from_fn(|k| if src.1[k] == dst.1[k] { 1.0 } else { dst.1[k] / src.1[k].max(1e-8) });
    let mut out = Vec::with_capacity(lab.len() * 3);
    for p in lab {
        let q: [f64; 3] = std::array::from_fn(|k| (p[k] - src.0[k]) * scale[k] + dst.0[k]);
        out.extend_from_slice(&lab_to_rgb(q));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_within_rounding() {
        // Black hits the LMS floor and comes back a few 1e-4 levels off.
        for r in (0..=255).step_by(15) {
            for g in (0..=255).step_by(15) {
                for b in (0..=255).step_by(15) {
                    let rgb = [r as f64, g as f64, b as f64];
                    let back = lab_to_rgb(rgb_to_lab(rgb));
                    for k in 0..3 {
                        assert!((back[k] - rgb[k]).abs() < 1e-3, "{rgb:?} -> {back:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn gray_has_zero_chroma() {
        let lab = rgb_to_lab([128.0; 3]);
        // Rows of the LMS matrix sum to ~1, so gray maps to near-zero alpha/beta.
        assert!(lab[1].abs() < 1e-3 && lab[2].abs() < 1e-3, "{lab:?}");
    }
}

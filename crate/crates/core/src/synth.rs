//! Seeded synthetic stained tiles for tests and benchmarking.
//!
//! Tiles are composed in OD space from a known colour matrix and known
//! concentration fields (a smooth counterstain with scattered nuclei and
//! unstained background), then quantised to 8 bits.

use std::f64::consts::PI;

use rand::Rng;

use crate::imaging::{od_to_intensity, quantize, OdBase, RgbImage};
use crate::seed::task_rng;
use crate::separation::{angle_between_deg, StainMatrix};

/// Reference haematoxylin / eosin OD colour vectors.
pub const HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];
pub const EOSIN: [f64; 3] = [0.072, 0.990, 0.105];

pub fn he_matrix() -> StainMatrix {
    StainMatrix::from_two_stains(HEMATOXYLIN, EOSIN).expect("reference H&E is valid")
}

/// An H&E-like matrix with each stain vector perturbed by up to `jitter` per
/// component before renormalisation.
pub fn perturbed_he_matrix<R: Rng + ?Sized>(rng: &mut R, jitter: f64) -> StainMatrix {
    loop {
        let h = HEMATOXYLIN.map(|v| (v + rng.random_range(-jitter..=jitter)).max(0.01));
        let e = EOSIN.map(|v| (v + rng.random_range(-jitter..=jitter)).max(0.01));
        if let Ok(m) = StainMatrix::from_two_stains(h, e) {
            return m;
        }
    }
}

/// Two random positive unit stain vectors at least `min_angle_deg` apart.
pub fn random_two_stain_matrix<R: Rng + ?Sized>(rng: &mut R, min_angle_deg: f64) -> StainMatrix {
    loop {
        let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        let b: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..1.0));
        if angle_between_deg(a, b) < min_angle_deg {
            continue;
        }
        if let Ok(m) = StainMatrix::from_two_stains(a, b) {
            return m;
        }
    }
}

struct Wave {
    fy: f64,
    fx: f64,
    phase: f64,
}

/// A tile whose first two stains follow `colour`'s first two columns; the
/// third stain is absent.
pub fn synthetic_tile<R: Rng + ?Sized>(
    rng: &mut R,
    height: usize,
    width: usize,
    colour: &StainMatrix,
) -> RgbImage {
    let waves: Vec<Wave> = (0..3)
        .map(|_| Wave {
            fy: rng.random_range(0.5..3.0) * 2.0 * PI / height as f64,
            fx: rng.random_range(0.5..3.0) * 2.0 * PI / width as f64,
            phase: rng.random_range(0.0..2.0 * PI),
        })
        .collect();
    let counter_level = rng.random_range(0.25..0.6);
    let counter_amp = rng.random_range(0.05..0.2);
    let nuclear_level = rng.random_range(0.6..1.1);

    let area = (height * width) as f64;
    let n_nuclei = ((area / 400.0) as usize).max(3);
    let nuclei: Vec<(f64, f64, f64)> = (0..n_nuclei)
        .map(|_| {
            (
                rng.random_range(0.0..height as f64),
                rng.random_range(0.0..width as f64),
                rng.random_range(2.5..7.0),
            )
        })
        .collect();
    // An unstained lumen.
    let lumen = (
        rng.random_range(0.0..height as f64),
        rng.random_range(0.0..width as f64),
        rng.random_range(0.1..0.25) * height.min(width) as f64,
    );

    let c = colour.matrix();
    let mut data = Vec::with_capacity(height * width * 3);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f64, x as f64);
            let field: f64 = waves
                .iter()
                .map(|w| (w.fy * fy + w.fx * fx + w.phase).sin())
                .sum::<f64>()
                / 3.0;
            let mut h = 0.0;
            let mut e = (counter_level + counter_amp * field + rng.random_range(-0.03..0.03)).max(0.0);
            if rng.random_bool(0.15) {
                h = rng.random_range(0.0..0.15);
            }
            for &(ny, nx, r) in &nuclei {
                let d2 = (fy - ny).powi(2) + (fx - nx).powi(2);
                if d2 <= r * r {
                    h = nuclear_level * (1.0 - 0.3 * d2 / (r * r)) + rng.random_range(-0.05..0.05);
                    e = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(0.0..0.15) };
                    break;
                }
            }
            if (fy - lumen.0).powi(2) + (fx - lumen.1).powi(2) <= lumen.2 * lumen.2 {
                h = 0.0;
                e = rng.random_range(0.0..0.02);
            }
            for i in 0..3 {
                let od = c[(i, 0)] * h + c[(i, 1)] * e;
                data.push(quantize(od_to_intensity(od.max(0.0), OdBase::Ten)));
            }
        }
    }
    RgbImage::new(height, width, data).expect("dimensions are positive")
}

/// Deterministic H&E-like corpus: image `i` uses its own perturbed matrix.
pub fn corpus(seed: u64, count: usize, size: usize) -> Vec<RgbImage> {
    (0..count)
        .map(|i| {
            let mut rng = task_rng(seed, i as u64, 0);
            let colour = perturbed_he_matrix(&mut rng, 0.08);
            synthetic_tile(&mut rng, size, size, &colour)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_is_deterministic() {
        let a = corpus(3, 2, 32);
        let b = corpus(3, 2, 32);
        assert_eq!(a, b);
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn random_matrices_are_valid() {
        let mut rng = task_rng(1, 0, 0);
        for _ in 0..50 {
            let m = random_two_stain_matrix(&mut rng, 20.0);
            assert!(angle_between_deg(m.column(0), m.column(1)) >= 20.0 - 1e-9);
        }
    }
}

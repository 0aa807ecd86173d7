//! Stain consistency loss: masked mean absolute difference between the
//! sigmoid outputs of two segmentation passes over a stain-augmented pair.

use crate::error::{Error, Result};
use crate::imaging::{FloatMap, Mask};
use crate::stats::pairwise_sum;

/// Logistic sigmoid without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_shapes(a: &FloatMap, b: &FloatMap, mask: &Mask) -> Result<()> {
    for found in [b.dims(), mask.dims()] {
        if found != a.dims() {
            return Err(Error::ShapeMismatch {
                expected: a.dims(),
                found,
            });
        }
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(())
}

fn masked_mean_abs(a: &FloatMap, b: &FloatMap, mask: &Mask, f: impl Fn(f64) -> f64) -> Result<f64> {
    check_shapes(a, b, mask)?;
    let diffs: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(mask.bits())
        .filter(|(_, m)| **m)
        .map(|((x, y), _)| (f(*x) - f(*y)).abs())
        .collect();
    Ok(pairwise_sum(&diffs) / diffs.len() as f64)
}

/// Mean absolute difference over the masked pixels.
pub fn masked_mae(a: &FloatMap, b: &FloatMap, mask: &Mask) -> Result<f64> {
    masked_mean_abs(a, b, mask, |v| v)
}

/// `(1/m) Σ_{i∈M} |σ(a_i) − σ(b_i)|`. With `inputs_are_probabilities` the
/// sigmoid is skipped. Summation is a fixed row-major pairwise tree, so the
/// result is bit-deterministic and symmetric in `a`, `b`.
pub fn stain_consistency_loss(
    a: &FloatMap,
    b: &FloatMap,
    mask: &Mask,
    inputs_are_probabilities: bool,
) -> Result<f64> {
    if inputs_are_probabilities {
        masked_mae(a, b, mask)
    } else {
        masked_mean_abs(a, b, mask, sigmoid)
    }
}

/// Analytic (sub)gradient of the loss with respect to `a`, row-major. Zero
/// outside the mask and at ties.
pub fn stain_consistency_grad(
    a: &FloatMap,
    b: &FloatMap,
    mask: &Mask,
    inputs_are_probabilities: bool,
) -> Result<Vec<f64>> {
    check_shapes(a, b, mask)?;
    let m = mask.count() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .zip(mask.bits())
        .map(|((&x, &y), &inside)| {
            if !inside {
                return 0.0;
            }
            let (px, py, dpx) = if inputs_are_probabilities {
                (x, y, 1.0)
            } else {
                let s = sigmoid(x);
                (s, sigmoid(y), s * (1.0 - s))
            };
            let sign = if px > py {
                1.0
            } else if px < py {
                -1.0
            } else {
                0.0
            };
            dpx * sign / m
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(h: usize, w: usize, v: Vec<f64>) -> FloatMap {
        FloatMap::new(h, w, v).unwrap()
    }

    #[test]
    fn two_by_two_case() {
        let a = map(2, 2, vec![0.0, 2.0, -2.0, 0.0]);
        let b = map(2, 2, vec![0.0; 4]);
        let mask = Mask::full(2, 2).unwrap();
        let s2 = 1.0 / (1.0 + (-2f64).exp());
        let want = ((s2 - 0.5).abs() + (1.0 - s2 - 0.5).abs()) / 4.0;
        let got = stain_consistency_loss(&a, &b, &mask, false).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn saturation_and_identity() {
        let a = map(3, 3, vec![40.0; 9]);
        let b = map(3, 3, vec![-40.0; 9]);
        let mask = Mask::full(3, 3).unwrap();
        assert!((stain_consistency_loss(&a, &b, &mask, false).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(stain_consistency_loss(&a, &a, &mask, false).unwrap(), 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn errors() {
        let a = map(2, 2, vec![0.0; 4]);
        let b = map(2, 3, vec![0.0; 6]);
        let full = Mask::full(2, 2).unwrap();
        let empty = Mask::new(2, 2, vec![false; 4]).unwrap();
        assert!(matches!(stain_consistency_loss(&a, &b, &full, false), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(stain_consistency_loss(&a, &a, &empty, false), Err(Error::EmptyMask)));
        assert!(matches!(masked_mae(&a, &a, &Mask::full(1, 4).unwrap()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn mae_constant_offset() {
        let a = map(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = map(2, 3, a.data().iter().map(|v| v - 0.25).collect());
        let mask = Mask::new(2, 3, vec![true, false, true, true, false, true]).unwrap();
        assert_eq!(masked_mae(&a, &b, &mask).unwrap(), 0.25);
    }

    fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<f64>, Vec<bool>)> {
        (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| {
            let n = h * w;
            (
                Just(h),
                Just(w),
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(-20.0f64..20.0, n),
                prop::collection::vec(any::<bool>(), n).prop_filter("nonempty", |m| m.iter().any(|b| *b)),
            )
        })
    }

    proptest! {
        #[test]
        fn symmetric_bounded_and_brute_force((h, w, a, b, m) in instance()) {
            let (fa, fb) = (map(h, w, a.clone()), map(h, w, b.clone()));
            let mask = Mask::new(h, w, m.clone()).unwrap();
            let l = stain_consistency_loss(&fa, &fb, &mask, false).unwrap();
            prop_assert_eq!(l.to_bits(), stain_consistency_loss(&fb, &fa, &mask, false).unwrap().to_bits());
            prop_assert!((0.0..=1.0).contains(&l));
            let mut sum = 0.0;
            let mut count = 0.0;
            for i in 0..h * w {
                if m[i] {
                    sum += (1.0 / (1.0 + (-a[i]).exp()) - 1.0 / (1.0 + (-b[i]).exp())).abs();
                    count += 1.0;
                }
            }
            prop_assert!((l - sum / count).abs() < 1e-12);
        }

        #[test]
        fn outside_mask_is_ignored((h, w, a, b, m) in instance(), junk in -1e6f64..1e6) {
            let mask = Mask::new(h, w, m.clone()).unwrap();
            let l = stain_consistency_loss(&map(h, w, a.clone()), &map(h, w, b.clone()), &mask, false).unwrap();
            let a2: Vec<f64> = a.iter().zip(&m).map(|(v, k)| if *k { *v } else { junk }).collect();
            let l2 = stain_consistency_loss(&map(h, w, a2), &map(h, w, b), &mask, false).unwrap();
            prop_assert_eq!(l.to_bits(), l2.to_bits());
        }

        #[test]
        fn saturation_is_monotone(x in 0.01f64..10.0, y in -10.0f64..-0.01, t in 1.0f64..20.0) {
            let d = (sigmoid(x) - sigmoid(y)).abs();
            let dt = (sigmoid(t * x) - sigmoid(t * y)).abs();
            prop_assert!(dt >= d);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (h, w) = (4, 5);
        let a: Vec<f64> = (0..20).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.7).collect();
        let b: Vec<f64> = (0..20).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.9).collect();
        let m: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let mask = Mask::new(h, w, m.clone()).unwrap();
        let grad = stain_consistency_grad(&map(h, w, a.clone()), &map(h, w, b.clone()), &mask, false).unwrap();
        let eps = 1e-6;
        for i in 0..20 {
            let mut up = a.clone();
            up[i] += eps;
            let mut down = a.clone();
            down[i] -= eps;
            let fd = (stain_consistency_loss(&map(h, w, up), &map(h, w, b.clone()), &mask, false).unwrap()
                - stain_consistency_loss(&map(h, w, down), &map(h, w, b.clone()), &mask, false).unwrap())
                / (2.0 * eps);
            assert!((fd - grad[i]).abs() < 1e-5, "{i}: {fd} vs {}", grad[i]);
        }
    }
}

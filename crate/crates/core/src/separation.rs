//! Colour deconvolution: stain matrix estimation (Macenko), concentration
//! solve, recomposition and per-stain statistics.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};

use crate::error::{Error, Result};
use crate::imaging::{OdImage, TissueMask};
use crate::stats::percentile_in_place;

/// Minimum number of tissue pixels for stain estimation.
pub const MIN_TISSUE_PIXELS: usize = 100;

/// Default extreme-angle percentile.
pub const DEFAULT_ANGLE_PERCENTILE: f64 = 1.0;

/// Extreme stain vectors closer than this are treated as one stain.
pub const MIN_STAIN_ANGLE_DEG: f64 = 1.0;

const UNIT_NORM_TOL: f64 = 1e-9;
const MIN_ABS_DET: f64 = 1e-6;
const MAX_CONDITION: f64 = 1e8;
/// Above this condition number concentrations are solved per pixel through
/// the LU factors instead of multiplying by a precomputed inverse.
const SOLVE_CONDITION: f64 = 1e4;

/// A 3x3 matrix whose columns are unit OD colour vectors, one per stain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainMatrix(Matrix3<f64>);

impl StainMatrix {
    /// Validates an already normalised matrix.
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        for j in 0..3 {
            let norm = m.column(j).norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidParameter(format!(
                    "stain matrix column {j} has norm {norm}, expected 1"
                )));
            }
        }
        if m.determinant().abs() <= MIN_ABS_DET || condition_number(&m) >= MAX_CONDITION {
            return Err(Error::SingularMatrix);
        }
        Ok(Self(m))
    }

    /// Normalises each column to unit length, then validates.
    pub fn from_columns(cols: [[f64; 3]; 3]) -> Result<Self> {
        let mut m = Matrix3::zeros();
        for (j, c) in cols.iter().enumerate() {
            let v = Vector3::from(*c);
            let norm = v.norm();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::SingularMatrix);
            }
            m.set_column(j, &(v / norm));
        }
        Self::new(m)
    }

    /// Interprets nine values as a row-major 3x3 matrix and normalises its
    /// columns.
    pub fn from_row_major(values: &[f64; 9]) -> Result<Self> {
        let m = Matrix3::from_row_slice(values);
        Self::from_columns([0, 1, 2].map(|j| [m[(0, j)], m[(1, j)], m[(2, j)]]))
    }

    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Two stain columns completed by their normalised cross product, with the
    /// sign convention applied to every column.
    pub fn from_two_stains(first: [f64; 3], second: [f64; 3]) -> Result<Self> {
        let a = sign_fixed(Vector3::from(first).normalize());
        let b = sign_fixed(Vector3::from(second).normalize());
        let cross = a.cross(&b);
        if !(cross.norm() > 0.0) {
            return Err(Error::SingularMatrix);
        }
        let c = sign_fixed(cross.normalize());
        Self::from_columns([a.into(), b.into(), c.into()])
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn column(&self, j: usize) -> [f64; 3] {
        let c = self.0.column(j);
        [c[0], c[1], c[2]]
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                out[i * 3 + j] = self.0[(i, j)];
            }
        }
        out
    }

    pub fn condition_number(&self) -> f64 {
        condition_number(&self.0)
    }
}

fn condition_number(m: &Matrix3<f64>) -> f64 {
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn sign_fixed(v: Vector3<f64>) -> Vector3<f64> {
    if v.sum() < 0.0 {
        -v
    } else {
        v
    }
}

/// Angle between two vectors in degrees.
pub fn angle_between_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let a = Vector3::from(a);
    let b = Vector3::from(b);
    let cos = a.dot(&b) / (a.norm() * b.norm());
    cos.clamp(-1.0, 1.0).acos().to_degrees()
}

/// Per-pixel stain concentrations, interleaved `[s1, s2, s3]` per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ConcentrationMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::InvalidImage(format!(
                "{height}x{width} concentration map needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("concentrations contain NaN or Inf".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, j: usize) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().skip(j).step_by(3).copied()
    }

    /// Applies `f(channel, value)` to every entry and clamps the result at 0.
    pub fn map_clamped(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let data = self
            .data
            .chunks_exact(3)
            .flat_map(|p| [f(0, p[0]).max(0.0), f(1, p[1]).max(0.0), f(2, p[2]).max(0.0)])
            .collect();
        Self::from_raw_unchecked(self.height, self.width, data)
    }
}

/// Per-stain mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

/// Estimates the stain colour matrix of `od` with Macenko's method.
///
/// Tissue OD vectors are projected onto the plane of the two leading singular
/// directions; the `angle_percentile` and `100 - angle_percentile` angles in
/// that plane give the two stain vectors. The third column is their
/// normalised cross product.
///
/// Columns are sign-fixed to a non-negative entry sum, and the first two are
/// ordered so that column 0 has the larger red OD (then green OD).
pub fn estimate_stain_matrix(
    od: &OdImage,
    mask: &TissueMask,
    angle_percentile: f64,
) -> Result<StainMatrix> {
    if !(angle_percentile > 0.0 && angle_percentile < 50.0) {
        return Err(Error::InvalidParameter(format!(
            "angle percentile must be in (0, 50), got {angle_percentile}"
        )));
    }
    if od.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            expected: od.dims(),
            found: mask.dims(),
        });
    }

    let tissue: Vec<[f64; 3]> = od
        .pixels()
        .zip(mask.bits())
        .filter_map(|(p, &m)| m.then_some(p))
        .collect();
    if tissue.len() < MIN_TISSUE_PIXELS {
        return Err(Error::InsufficientTissue {
            found: tissue.len(),
            required: MIN_TISSUE_PIXELS,
        });
    }

    // Right singular vectors of the N x 3 data matrix are the eigenvectors of
    // its 3 x 3 Gram matrix.
    let mut gram = Matrix3::<f64>::zeros();
    for p in &tissue {
        let v = Vector3::from(*p);
        gram += v * v.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let e1 = sign_fixed(eig.eigenvectors.column(order[0]).into_owned());
    let e2 = eig.eigenvectors.column(order[1]).into_owned();

    let mut angles: Vec<f64> = tissue
        .iter()
        .map(|p| {
            let v = Vector3::from(*p);
            v.dot(&e2).atan2(v.dot(&e1))
        })
        .collect();
    let lo = percentile_in_place(&mut angles, angle_percentile).expect("non-empty");
    let hi = percentile_in_place(&mut angles, 100.0 - angle_percentile).expect("non-empty");

    let spread = (hi - lo).to_degrees();
    if spread < MIN_STAIN_ANGLE_DEG {
        return Err(Error::DegenerateStains { angle_deg: spread });
    }

    let v_lo = sign_fixed((e1 * lo.cos() + e2 * lo.sin()).normalize());
    let v_hi = sign_fixed((e1 * hi.cos() + e2 * hi.sin()).normalize());
    let (first, second) = if (v_lo[0], v_lo[1]) >= (v_hi[0], v_hi[1]) {
        (v_lo, v_hi)
    } else {
        (v_hi, v_lo)
    };
    StainMatrix::from_two_stains(first.into(), second.into())
}

/// Solves `C s = od` for every pixel and clamps negative concentrations to 0.
pub fn compute_concentrations(od: &OdImage, c: &StainMatrix) -> Result<ConcentrationMap> {
    let data = solve_pixels(od.data(), c)?;
    let data = data.into_iter().map(|v| v.max(0.0)).collect();
    Ok(ConcentrationMap::from_raw_unchecked(od.height(), od.width(), data))
}

/// Unclamped per-pixel solve of interleaved OD triples.
pub(crate) fn solve_pixels(od: &[f64], c: &StainMatrix) -> Result<Vec<f64>> {
    let lu = c.0.lu();
    let mut out = Vec::with_capacity(od.len());
    if c.condition_number() < SOLVE_CONDITION {
        let inv = lu.try_inverse().ok_or(Error::SingularMatrix)?;
        for p in od.chunks_exact(3) {
            let s = inv * Vector3::new(p[0], p[1], p[2]);
            out.extend_from_slice(s.as_slice());
        }
    } else {
        if !lu.is_invertible() {
            return Err(Error::SingularMatrix);
        }
        for p in od.chunks_exact(3) {
            let s = lu
                .solve(&Vector3::new(p[0], p[1], p[2]))
                .ok_or(Error::SingularMatrix)?;
            out.extend_from_slice(s.as_slice());
        }
    }
    Ok(out)
}

/// `C s` per pixel without clamping.
pub fn recompose_unclamped(c: &StainMatrix, s: &ConcentrationMap) -> Vec<f64> {
    let m = c.0;
    let mut out = Vec::with_capacity(s.data.len());
    for p in s.data.chunks_exact(3) {
        let v = m * Vector3::new(p[0], p[1], p[2]);
        out.extend_from_slice(v.as_slice());
    }
    out
}

/// `C s` per pixel, clamped at zero OD.
pub fn recompose(c: &StainMatrix, s: &ConcentrationMap) -> OdImage {
    let data = recompose_unclamped(c, s)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    OdImage::from_raw_unchecked(s.height, s.width, data)
}

/// Mean and population standard deviation of each stain over masked pixels.
pub fn concentration_stats(s: &ConcentrationMap, mask: &TissueMask) -> Result<ChannelStats> {
    if s.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            expected: s.dims(),
            found: mask.dims(),
        });
    }
    // Two passes: exact mean, then squared deviations from it.
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    for (p, &m) in s.data.chunks_exact(3).zip(mask.bits()) {
        if m {
            n += 1;
            for k in 0..3 {
                sum[k] += p[k];
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    let mean = sum.map(|v| v / n as f64);
    let mut sq = [0.0f64; 3];
    for (p, &m) in s.data.chunks_exact(3).zip(mask.bits()) {
        if m {
            for k in 0..3 {
                let d = p[k] - mean[k];
                sq[k] += d * d;
            }
        }
    }
    Ok(ChannelStats {
        mean,
        std: sq.map(|v| (v / n as f64).sqrt()),
    })
}

//! Image containers and optical-density conversion.
//!
//! Every image here is a plain row-major buffer with three interleaved
//! channels (or one, for [`FloatMap`] and [`Mask`]). Values are immutable once
//! built; the conversion functions allocate fresh outputs.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `log10(255)`, the optical density of a fully absorbing (clamped) channel.
pub const OD_MAX: f64 = 2.406_540_180_433_955;

/// Default tissue threshold in OD units.
pub const DEFAULT_TISSUE_THRESHOLD: f64 = 0.15;

fn check_dims(height: usize, width: usize, len: usize, channels: usize) -> Result<()> {
    if height == 0 || width == 0 {
        return Err(Error::InvalidImage(format!(
            "dimensions must be positive, got {height}x{width}"
        )));
    }
    if height * width * channels != len {
        return Err(Error::InvalidImage(format!(
            "{height}x{width}x{channels} image needs {} values, got {len}",
            height * width * channels
        )));
    }
    Ok(())
}

/// An 8-bit RGB image.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RgbImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RgbImage")
            .field("height", &self.height)
            .field("width", &self.width)
            .finish_non_exhaustive()
    }
}

impl RgbImage {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        check_dims(height, width, data.len(), 3)?;
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self::new(height, width, data)
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel.
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> [u8; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self::new(height, width, data)
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |y, x| {
            self.pixel(y, self.width - 1 - x)
        })
        .expect("dimensions already validated")
    }
}

/// An optical-density image, three channels per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl OdImage {
    /// Values must be finite and non-negative.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len(), 3)?;
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidImage(format!(
                "optical density must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub(crate) fn from_raw_unchecked(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), height * width * 3);
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

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }
}

/// A boolean per-pixel mask. Used both for tissue masks and ground-truth
/// object masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

pub type TissueMask = Mask;

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(height, width, bits.len(), 1)?;
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn full(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![true; height * width])
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

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }
}

/// A single-channel float map, e.g. model logits.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FloatMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width, data.len(), 1)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidImage("float map contains NaN or Inf".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Exponential base used when turning optical density back into intensity.
///
/// Decomposition always uses base 10. `Ten` makes recomposition its exact
/// inverse; `E` recomposes with `exp(-od)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[derive(clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OdBase {
    #[default]
    #[value(name = "10", alias = "ten")]
    Ten,
    #[value(name = "e")]
    E,
}

impl OdBase {
    /// Transmitted fraction `base^(-od)`.
    #[inline]
    pub fn transmittance(self, od: f64) -> f64 {
        match self {
            OdBase::Ten => (-od * std::f64::consts::LN_10).exp(),
            OdBase::E => (-od).exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OdBase::Ten => "ten",
            OdBase::E => "e",
        }
    }
}

fn od_lut() -> &'static [f64; 256] {
    static LUT: OnceLock<[f64; 256]> = OnceLock::new();
    LUT.get_or_init(|| {
        let mut lut = [0.0; 256];
        for (v, od) in lut.iter_mut().enumerate() {
            *od = (255.0 / v.max(1) as f64).log10();
        }
        lut
    })
}

/// Optical density of a single 8-bit channel value; zero is clamped to one.
#[inline]
pub fn channel_to_od(v: u8) -> f64 {
    od_lut()[v as usize]
}

/// Unclamped float intensity in `[0, 255]`-scale units for an OD value.
#[inline]
pub fn od_to_intensity(od: f64, base: OdBase) -> f64 {
    255.0 * base.transmittance(od)
}

/// Rounds and clamps a float intensity to 8 bits.
#[inline]
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    v.round().clamp(0.0, 255.0) as u8
}

pub fn rgb_to_od(img: &RgbImage) -> OdImage {
    let lut = od_lut();
    let data = img.data.iter().map(|&v| lut[v as usize]).collect();
    OdImage::from_raw_unchecked(img.height, img.width, data)
}

pub fn od_to_rgb(od: &OdImage) -> RgbImage {
    od_to_rgb_with_base(od, OdBase::Ten)
}

pub fn od_to_rgb_with_base(od: &OdImage, base: OdBase) -> RgbImage {
    let data = od
        .data
        .iter()
        .map(|&v| quantize(od_to_intensity(v, base)))
        .collect();
    RgbImage {
        height: od.height,
        width: od.width,
        data,
    }
}

/// A pixel is tissue when its largest channel OD exceeds `threshold`.
pub fn tissue_mask(od: &OdImage, threshold: f64) -> Result<TissueMask> {
    if !(threshold >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "tissue threshold must be >= 0, got {threshold}"
        )));
    }
    let bits = od
        .pixels()
        .map(|p| p[0].max(p[1]).max(p[2]) > threshold)
        .collect();
    Ok(Mask {
        height: od.height,
        width: od.width,
        bits,
    })
}

//! PNG and PFM readers/writers.
//!
//! All writers go through [`write_atomic`] so an interrupted run never leaves
//! a truncated file at the destination path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ImageEncoder, ImageFormat};

use crate::error::{Error, Result};
use crate::imaging::{FloatMap, Mask, RgbImage};
use crate::metrics::InstanceMap;

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn decode_png(path: &Path) -> Result<DynamicImage> {
    let bytes = read_bytes(path)?;
    image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads an 8-bit PNG as RGB. Gray is replicated and alpha is dropped.
pub fn load_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    match img {
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageRgb8(_)
        | DynamicImage::ImageRgba8(_) => {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            RgbImage::new(h as usize, w as usize, rgb.into_raw())
        }
        _ => Err(Error::UnsupportedBitDepth {
            path: path.to_path_buf(),
        }),
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            img.data(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_png(img)?)
}

/// Reads a mask PNG (any 8- or 16-bit gray/colour PNG); nonzero luma is set.
pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = decode_png(path)?.to_luma16();
    let (w, h) = img.dimensions();
    Mask::new(
        h as usize,
        w as usize,
        img.into_raw().into_iter().map(|v| v != 0).collect(),
    )
}

/// Reads a single-channel 8- or 16-bit PNG of instance labels.
pub fn load_instance_png(path: impl AsRef<Path>) -> Result<InstanceMap> {
    let path = path.as_ref();
    let img = decode_png(path)?;
    let (w, h, labels): (u32, u32, Vec<u32>) = match img {
        DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            (w, h, g.into_raw().into_iter().map(u32::from).collect())
        }
        DynamicImage::ImageLuma16(g) => {
            let (w, h) = g.dimensions();
            (w, h, g.into_raw().into_iter().map(u32::from).collect())
        }
        _ => {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                message: "instance maps must be single-channel gray PNGs".into(),
            })
        }
    };
    InstanceMap::new(h as usize, w as usize, labels)
}

/// Writes instance labels as a 16-bit gray PNG.
pub fn save_instance_png(map: &InstanceMap, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::with_capacity(map.labels().len() * 2);
    for &l in map.labels() {
        let v = u16::try_from(l).map_err(|_| {
            Error::InvalidParameter(format!("label {l} does not fit in a 16-bit PNG"))
        })?;
        // The encoder expects native-endian u16 samples.
        bytes.extend_from_slice(&v.to_ne_bytes());
    }
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            &bytes,
            map.width() as u32,
            map.height() as u32,
            image::ExtendedColorType::L16,
        )
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    write_atomic(path.as_ref(), &out)
}

/// Writes a mask as an 8-bit gray PNG (255 = set).
pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            &bytes,
            mask.width() as u32,
            mask.height() as u32,
            image::ExtendedColorType::L8,
        )
        .map_err(|e| Error::InvalidImage(e.to_string()))?;
    write_atomic(path.as_ref(), &out)
}

/// A decoded portable float map, rows stored top to bottom.
#[derive(Debug, Clone, PartialEq)]
pub struct Pfm {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

/// Encodes little-endian PFM (scale -1.0). `data` is row-major, top row
/// first; the file stores the bottom row first as the format requires.
pub fn encode_pfm(height: usize, width: usize, channels: usize, data: &[f32]) -> Result<Vec<u8>> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidParameter(format!(
            "PFM supports 1 or 3 channels, got {channels}"
        )));
    }
    if data.len() != height * width * channels {
        return Err(Error::InvalidImage("PFM data length mismatch".into()));
    }
    let tag = if channels == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{width} {height}\n-1.0\n").into_bytes();
    let row_len = width * channels;
    for row in data.chunks_exact(row_len).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> std::result::Result<Pfm, String> {
    // Header: three whitespace-separated fields then exactly one whitespace byte.
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|e| e.to_string())?);
    }
    if pos >= bytes.len() {
        return Err("truncated header".into());
    }
    pos += 1;

    let channels = match fields[0] {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(format!("bad magic {other:?}")),
    };
    let width: usize = fields[1].parse().map_err(|_| "bad width".to_string())?;
    let height: usize = fields[2].parse().map_err(|_| "bad height".to_string())?;
    let scale: f32 = fields[3].parse().map_err(|_| "bad scale".to_string())?;
    if width == 0 || height == 0 || scale == 0.0 || !scale.is_finite() {
        return Err("invalid header values".into());
    }
    let little = scale < 0.0;
    let n = width * height * channels;
    let body = &bytes[pos..];
    if body.len() != n * 4 {
        return Err(format!("expected {} data bytes, found {}", n * 4, body.len()));
    }
    let values: Vec<f32> = body
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = width * channels;
    let data = values.chunks_exact(row_len).rev().flatten().copied().collect();
    Ok(Pfm {
        height,
        width,
        channels,
        data,
    })
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<Pfm> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    decode_pfm(&bytes).map_err(|message| Error::Decode {
        path: path.to_path_buf(),
        message,
    })
}

pub fn save_pfm(
    path: impl AsRef<Path>,
    height: usize,
    width: usize,
    channels: usize,
    data: &[f32],
) -> Result<()> {
    write_atomic(path.as_ref(), &encode_pfm(height, width, channels, data)?)
}

/// Reads a single-channel PFM as a float map.
pub fn load_float_map(path: impl AsRef<Path>) -> Result<FloatMap> {
    let path = path.as_ref();
    let pfm = load_pfm(path)?;
    if pfm.channels != 1 {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            message: format!("expected a single-channel PFM, found {} channels", pfm.channels),
        });
    }
    FloatMap::new(
        pfm.height,
        pfm.width,
        pfm.data.into_iter().map(f64::from).collect(),
    )
}

pub fn save_float_map(map: &FloatMap, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f32> = map.data().iter().map(|&v| v as f32).collect();
    save_pfm(path, map.height(), map.width(), 1, &data)
}

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = stage(path, bytes)?;
    tmp.persist(path)
        .map(|_| ())
        .map_err(|e| Error::io(path, e.error))
}

/// A temp file holding the full contents destined for `path`.
pub(crate) fn stage(path: &Path, bytes: &[u8]) -> Result<tempfile::NamedTempFile> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::Builder::new()
        .prefix(".stainkit-")
        .tempfile_in(&dir)
        .map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(tmp)
}

/// Lists `*.png` files in `dir`, sorted by file name.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png && path.is_file() {
            out.push(path);
        }
    }
    out.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RgbImage {
        RgbImage::from_fn(5, 7, |y, x| [(y * 40) as u8, (x * 30) as u8, ((x + y) * 11) as u8])
            .unwrap()
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = sample();
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn rgba_drops_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgba.png");
        let rgba = image::RgbaImage::from_fn(3, 2, |x, y| image::Rgba([x as u8 * 9, y as u8 * 7, 200, 255]));
        rgba.save(&path).unwrap();
        let img = load_png(&path).unwrap();
        assert_eq!(img.dims(), (2, 3));
        assert_eq!(img.pixel(1, 2), [18, 7, 200]);
    }

    #[test]
    fn gray_is_replicated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        image::GrayImage::from_pixel(2, 2, image::Luma([77])).save(&path).unwrap();
        assert_eq!(load_png(&path).unwrap().pixel(0, 0), [77, 77, 77]);
    }

    #[test]
    fn sixteen_bit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deep.png");
        image::ImageBuffer::<image::Rgb<u16>, _>::from_pixel(2, 2, image::Rgb([1000u16, 2, 3]))
            .save(&path)
            .unwrap();
        assert!(matches!(load_png(&path), Err(Error::UnsupportedBitDepth { .. })));
    }

    #[test]
    fn truncated_png_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let bytes = encode_png(&sample()).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = load_png(&path).unwrap_err();
        assert!(matches!(err, Error::Decode { .. }), "{err:?}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_png("/nonexistent/x.png").unwrap_err();
        assert!(err.is_io());
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn pfm_round_trip_and_orientation() {
        let data: Vec<f32> = (0..6).map(|v| v as f32 * 0.5 - 1.0).collect();
        let bytes = encode_pfm(2, 3, 1, &data).unwrap();
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // Bottom row is stored first.
        let body = &bytes[12..];
        assert_eq!(f32::from_le_bytes(body[0..4].try_into().unwrap()), data[3]);
        let pfm = decode_pfm(&bytes).unwrap();
        assert_eq!((pfm.height, pfm.width, pfm.channels), (2, 3, 1));
        assert_eq!(pfm.data, data);
    }

    #[test]
    fn pfm_big_endian_and_errors() {
        let mut bytes = b"Pf\n1 2\n1.0\n".to_vec();
        bytes.extend_from_slice(&2.5f32.to_be_bytes());
        bytes.extend_from_slice(&(-1.0f32).to_be_bytes());
        let pfm = decode_pfm(&bytes).unwrap();
        assert_eq!(pfm.data, vec![-1.0, 2.5]);
        assert!(decode_pfm(b"P6\n1 1\n-1.0\n").is_err());
        assert!(decode_pfm(b"Pf\n1 1\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn instance_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inst.png");
        let map = InstanceMap::new(2, 3, vec![0, 1, 300, 65535, 0, 2]).unwrap();
        save_instance_png(&map, &path).unwrap();
        assert_eq!(load_instance_png(&path).unwrap(), map);
    }

    #[test]
    fn listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["b.png", "a.PNG", "c.txt", "aa.png"] {
            fs::write(dir.path().join(name), b"x").unwrap();
        }
        let names: Vec<_> = list_pngs(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["a.PNG", "aa.png", "b.png"]);
    }
}

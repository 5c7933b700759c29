//! Grayscale raster container, raster I/O, perturbation norms and the
//! epsilon-ball projection used by every attack.
//!
//! Two on-disk formats are supported:
//!
//! * binary PGM (`P5`), 8-bit only. Loading scales by `maxval`, saving
//!   quantizes to 0..=255, so an 8-bit file round-trips bit-exactly.
//! * a lossless float format: `u32` width, `u32` height (little-endian)
//!   followed by `width * height` little-endian `f32` values, row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest accepted side length; the detector's receptive field needs room.
pub const MIN_SIDE: usize = 32;

/// A row-major grayscale image with values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::TooSmall {
                width,
                height,
                min: MIN_SIDE,
            });
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericFailure("image data"));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Result<Self> {
        Image::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, value: f32) {
        self.data[y * self.width + x] = value;
    }

    /// Pixel values widened to `f64`, the detector's working precision.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn clamped(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm_bytes(bytes: &[u8]) -> Result<Image> {
        let mut cursor = 0usize;
        let magic = next_token(bytes, &mut cursor)?;
        if magic != b"P5" {
            return Err(Error::Format("missing P5 magic".into()));
        }
        let width = parse_header_int(next_token(bytes, &mut cursor)?)?;
        let height = parse_header_int(next_token(bytes, &mut cursor)?)?;
        let maxval = parse_header_int(next_token(bytes, &mut cursor)?)?;
        if maxval == 0 || maxval > 255 {
            return Err(Error::UnsupportedDepth(maxval as u32));
        }
        // exactly one whitespace byte separates the header from the raster
        cursor += 1;
        let raster = bytes
            .get(cursor..)
            .filter(|r| r.len() >= width * height)
            .ok_or_else(|| Error::Format("truncated raster".into()))?;
        let scale = maxval as f32;
        let data = raster[..width * height]
            .iter()
            .map(|&b| f32::from(b) / scale)
            .collect();
        Image::new(width, height, data)
    }

    pub fn to_float_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.data.len());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_float_bytes(bytes: &[u8]) -> Result<Image> {
        if bytes.len() < 8 {
            return Err(Error::Format("float image shorter than its header".into()));
        }
        let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != 4 * width * height {
            return Err(Error::Format(format!(
                "float image {width}x{height} expects {} payload bytes, found {}",
                4 * width * height,
                body.len()
            )));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Image::new(width, height, data)
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn save_float(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_float_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Saves as PGM when the extension is `.pgm`, otherwise in the float format.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        match path.extension().and_then(|e| e.to_str()) {
            Some("pgm") => self.save_pgm(path),
            _ => self.save_float(path),
        }
    }
}

fn next_token<'a>(bytes: &'a [u8], cursor: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*cursor) {
            Some(b'#') => {
                while bytes.get(*cursor).is_some_and(|&b| b != b'\n') {
                    *cursor += 1;
                }
            }
            Some(b) if b.is_ascii_whitespace() => *cursor += 1,
            Some(_) => break,
            None => return Err(Error::Format("truncated header".into())),
        }
    }
    let start = *cursor;
    while bytes
        .get(*cursor)
        .is_some_and(|b| !b.is_ascii_whitespace())
    {
        *cursor += 1;
    }
    Ok(&bytes[start..*cursor])
}

fn parse_header_int(token: &[u8]) -> Result<usize> {
    std::str::from_utf8(token)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("bad header field {:?}", String::from_utf8_lossy(token))))
}

/// Reads a PGM (`P5`) or float-format image, sniffing the content.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        Image::from_pgm_bytes(&bytes)
    } else if bytes.first() == Some(&b'P') {
        Err(Error::Format("only binary 8-bit PGM (P5) is supported".into()))
    } else {
        Image::from_float_bytes(&bytes)
    }
}

/// Norms of `perturbed - original`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub l2: f64,
    pub linf: f64,
    pub mse: f64,
}

impl PerturbationStats {
    /// Root-mean-square per-pixel difference; the attacks' stopping metric.
    pub fn rmse(&self) -> f64 {
        self.mse.sqrt()
    }
}

pub fn perturbation_stats(original: &Image, perturbed: &Image) -> Result<PerturbationStats> {
    original.same_shape(perturbed)?;
    let mut sum_sq = 0.0f64;
    let mut linf = 0.0f64;
    for (&a, &b) in original.data.iter().zip(&perturbed.data) {
        let d = f64::from(b) - f64::from(a);
        sum_sq += d * d;
        linf = linf.max(d.abs());
    }
    Ok(PerturbationStats {
        l2: sum_sq.sqrt(),
        linf,
        mse: sum_sq / original.data.len() as f64,
    })
}

/// Projects `candidate` onto `[center - eps, center + eps] ∩ [0, 1]`, per pixel.
pub fn clip_to_ball(candidate: &Image, center: &Image, epsilon: f32) -> Result<Image> {
    candidate.same_shape(center)?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon must be non-negative, got {epsilon}"
        )));
    }
    let data = candidate
        .data
        .iter()
        .zip(&center.data)
        .map(|(&v, &c)| clip_pixel(v, c, epsilon))
        .collect();
    Ok(Image {
        width: candidate.width,
        height: candidate.height,
        data,
    })
}

#[inline]
pub(crate) fn clip_pixel(value: f32, center: f32, epsilon: f32) -> f32 {
    value.clamp(center - epsilon, center + epsilon).clamp(0.0, 1.0)
}

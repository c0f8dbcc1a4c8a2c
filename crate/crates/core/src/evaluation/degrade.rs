//! Image degradations for the robustness sweep and for augmentation.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::ingest::reflect;
use crate::error::{config, Error, Result};

/// Codec identification recorded in every report; JPEG bytes are only stable for a fixed codec.
pub const CODEC_VERSIONS: &str = "image 0.25 built-in JPEG encoder; zune-jpeg 0.5 decoder; png 0.18";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum DegradationKind {
    GaussianBlur,
    Jpeg,
}

impl DegradationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianBlur => "gaussian_blur",
            Self::Jpeg => "jpeg",
        }
    }
}

/// A degradation family and the levels to sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub levels: Vec<u32>,
}

impl DegradationSpec {
    pub fn default_blur() -> Self {
        Self { kind: DegradationKind::GaussianBlur, levels: vec![3, 5, 7, 9, 11, 13] }
    }

    pub fn default_jpeg() -> Self {
        Self { kind: DegradationKind::Jpeg, levels: vec![100, 90, 80, 70, 60, 50] }
    }

    pub fn defaults() -> Vec<Self> {
        vec![Self::default_blur(), Self::default_jpeg()]
    }

    pub fn validate(&self) -> Result<()> {
        for &l in &self.levels {
            match self.kind {
                DegradationKind::GaussianBlur if l % 2 == 0 || l == 0 => {
                    return Err(config(format!("blur kernel {l} must be odd and positive")))
                }
                DegradationKind::Jpeg if !(1..=100).contains(&l) => {
                    return Err(config(format!("JPEG quality {l} outside 1..=100")))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Degradation applied to one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Degradation {
    /// Returns the image unchanged.
    Identity,
    GaussianBlur(u32),
    Jpeg(u8),
}

impl Degradation {
    pub fn new(kind: DegradationKind, level: u32) -> Result<Self> {
        let spec = DegradationSpec { kind, levels: vec![level] };
        spec.validate()?;
        Ok(match kind {
            DegradationKind::GaussianBlur => Self::GaussianBlur(level),
            DegradationKind::Jpeg => Self::Jpeg(level as u8),
        })
    }

    pub fn apply(self, img: &RgbImage) -> Result<RgbImage> {
        match self {
            Self::Identity => Ok(img.clone()),
            Self::GaussianBlur(k) => gaussian_blur(img, k),
            Self::Jpeg(q) => jpeg_roundtrip(img, q),
        }
    }
}

/// `σ = 0.3·((k − 1)/2 − 1) + 0.8`.
pub fn blur_sigma(k: u32) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1-D Gaussian taps of odd length `k`.
pub fn gaussian_taps(k: u32) -> Result<Vec<f64>> {
    if k % 2 == 0 || k == 0 {
        return Err(config(format!("blur kernel {k} must be odd and positive")));
    }
    let s = blur_sigma(k);
    let r = (k / 2) as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Separable blur of one `h × w` plane with reflected borders.
pub fn blur_plane(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * data[y * w + reflect(x as isize + i as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[reflect(y as isize + i as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

pub fn gaussian_blur(img: &RgbImage, k: u32) -> Result<RgbImage> {
    let taps = gaussian_taps(k)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut out = vec![0u8; raw.len()];
    for c in 0..3 {
        let plane: Vec<f64> = (0..h * w).map(|p| raw[p * 3 + c] as f64).collect();
        for (p, v) in blur_plane(&plane, h, w, &taps).into_iter().enumerate() {
            out[p * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::from_raw(w as u32, h as u32, out).ok_or_else(|| config("blur produced a buffer of the wrong size"))
}

pub fn jpeg_roundtrip(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    if !(1..=100).contains(&quality) {
        return Err(config(format!("JPEG quality {quality} outside 1..=100")));
    }
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(img)
        .map_err(|e| Error::Decode { path: "<jpeg encode>".into(), reason: e.to_string() })?;
    let dec = image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|e| Error::Decode { path: "<jpeg decode>".into(), reason: e.to_string() })?;
    Ok(dec.to_rgb8())
}

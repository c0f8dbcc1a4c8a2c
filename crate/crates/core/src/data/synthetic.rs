//! Generator of small synthetic forgery corpora with known masks.
//!
//! * `splice`: smooth random scenes with faint sensor-like noise; manipulated images receive a
//!   pasted region cut from another scene and carrying a much stronger noise level.
//! * `edge`: noise-free smooth scenes; manipulated images receive a region of pure
//!   high-frequency texture whose amplitude is a few gray levels, so only high-pass residuals
//!   expose it.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Label, Manifest, MaskPolarity, Record};
use crate::error::{config, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Splice,
    Edge,
}

impl std::str::FromStr for CorpusKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "splice" => Ok(Self::Splice),
            "edge" => Ok(Self::Edge),
            other => Err(config(format!("unknown corpus kind {other:?} (splice, edge)"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub kind: CorpusKind,
    pub count: usize,
    pub size: usize,
    /// Fraction of manipulated images.
    pub manipulated: f64,
    pub seed: u64,
    /// Gray-level amplitude of the edge texture.
    pub edge_amplitude: f64,
}

impl CorpusSpec {
    pub fn toy(kind: CorpusKind, seed: u64) -> Self {
        Self { kind, count: 200, size: 64, manipulated: 0.5, seed, edge_amplitude: 3.0 }
    }
}

/// A generated sample before it is written to disk.
pub struct Sample {
    pub image: RgbImage,
    /// `{0, 1}`; all zero for authentic images.
    pub mask: GrayImage,
    pub label: Label,
}

/// Smooth scene in `[0, 255]`: a base color plus a few low-frequency sinusoids per channel.
fn scene(rng: &mut ChaCha8Rng, size: usize) -> Vec<[f64; 3]> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(60.0..190.0));
    let waves: Vec<(usize, f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.random_range(0..3),
                rng.random_range(-0.12..0.12),
                rng.random_range(-0.12..0.12),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(10.0..35.0),
            )
        })
        .collect();
    let mut px = vec![base; size * size];
    for y in 0..size {
        for x in 0..size {
            for &(c, fx, fy, ph, amp) in &waves {
                px[y * size + x][c] += amp * (fx * x as f64 + fy * y as f64 + ph).sin();
            }
        }
    }
    px
}

/// Random rectangle or ellipse covering roughly 6–25 % of the image.
fn region(rng: &mut ChaCha8Rng, size: usize) -> GrayImage {
    let lo = (size / 4).max(2);
    let hi = (size / 2).max(lo + 1);
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    let y0 = rng.random_range(0..=size - h);
    let x0 = rng.random_range(0..=size - w);
    let ellipse = rng.random_bool(0.5);
    let (cy, cx) = (y0 as f64 + h as f64 / 2.0, x0 as f64 + w as f64 / 2.0);
    GrayImage::from_fn(size as u32, size as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let inside = y >= y0 && y < y0 + h && x >= x0 && x < x0 + w;
        let inside = inside
            && (!ellipse || {
                let dy = (y as f64 + 0.5 - cy) / (h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (w as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            });
        Luma([u8::from(inside)])
    })
}

fn to_image(px: &[[f64; 3]], size: usize) -> RgbImage {
    RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let p = px[y as usize * size + x as usize];
        Rgb(p.map(|v| v.round().clamp(0.0, 255.0) as u8))
    })
}

pub fn sample(spec: &CorpusSpec, index: usize) -> Result<Sample> {
    if spec.size < 8 {
        return Err(config("synthetic images must be at least 8 pixels wide"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let n = spec.size;
    let manipulated = rng.random_bool(spec.manipulated.clamp(0.0, 1.0));
    let mut px = scene(&mut rng, n);
    let mask = if manipulated { region(&mut rng, n) } else { GrayImage::new(n as u32, n as u32) };
    match spec.kind {
        CorpusKind::Splice => {
            let donor = scene(&mut rng, n);
            let faint = Normal::new(0.0, rng.random_range(0.5..2.0)).map_err(|e| config(e.to_string()))?;
            let strong = Normal::new(0.0, rng.random_range(8.0..14.0)).map_err(|e| config(e.to_string()))?;
            for (i, p) in px.iter_mut().enumerate() {
                let inside = mask.as_raw()[i] == 1;
                if inside {
                    *p = donor[i];
                }
                let d = if inside { &strong } else { &faint };
                for v in p.iter_mut() {
                    *v += d.sample(&mut rng);
                }
            }
        }
        CorpusKind::Edge => {
            let a = spec.edge_amplitude;
            for y in 0..n {
                for x in 0..n {
                    if mask.as_raw()[y * n + x] == 1 {
                        let s = if (x + y) % 2 == 0 { a } else { -a };
                        for v in px[y * n + x].iter_mut() {
                            *v += s;
                        }
                    }
                }
            }
        }
    }
    let label = if manipulated { Label::Manipulated } else { Label::Authentic };
    Ok(Sample { image: to_image(&px, n), mask, label })
}

/// Writes `count` samples plus `manifest.jsonl` into `dir` and returns the manifest.
pub fn write_corpus(spec: &CorpusSpec, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = sample(spec, i)?;
        let img_path = dir.join(format!("img_{i:05}.png"));
        s.image.save(&img_path).map_err(|e| Error::Decode { path: img_path.clone(), reason: e.to_string() })?;
        let mask = if s.label.is_manipulated() {
            let p = dir.join(format!("img_{i:05}_mask.png"));
            let scaled = GrayImage::from_fn(s.mask.width(), s.mask.height(), |x, y| Luma([s.mask.get_pixel(x, y).0[0] * 255]));
            scaled.save(&p).map_err(|e| Error::Decode { path: p.clone(), reason: e.to_string() })?;
            Some(p)
        } else {
            None
        };
        let source = match spec.kind {
            CorpusKind::Splice => "synthetic-splice",
            CorpusKind::Edge => "synthetic-edge",
        };
        records.push(Record { image: img_path, mask, label: s.label, source: source.into(), mask_polarity: MaskPolarity::ManipulatedWhite });
    }
    let m = Manifest::new(records, dir);
    m.write(&dir.join("manifest.jsonl"))?;
    Ok(m)
}

//! Training-time augmentation: random rescale, random crop and JPEG re-compression.
//!
//! The mask follows the geometric steps with nearest-neighbor resampling and never sees the
//! photometric ones, so it stays binary.

use image::imageops::{self, FilterType};
use image::{GrayImage, RgbImage};
use rand::Rng;

use crate::config::TrainConfig;
use crate::data::ingest::reflect;
use crate::error::Result;
use crate::evaluation::degrade::jpeg_roundtrip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub scale: f64,
    /// Top-left corner of the crop; `None` centers it.
    pub offset: Option<(u32, u32)>,
    pub quality: u8,
}

impl AugmentParams {
    pub fn sample(cfg: &TrainConfig, size: (u32, u32), rng: &mut impl Rng) -> Self {
        let [lo, hi] = cfg.scale_range;
        let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (w, h) = scaled(size, scale);
        let crop = cfg.crop as u32;
        let y = rng.random_range(0..=h.max(crop) - crop);
        let x = rng.random_range(0..=w.max(crop) - crop);
        let [q0, q1] = cfg.jpeg_qf_range;
        let quality = rng.random_range(q0..=q1);
        Self { scale, offset: Some((y, x)), quality }
    }
}

fn scaled((w, h): (u32, u32), s: f64) -> (u32, u32) {
    (((w as f64 * s).round() as u32).max(1), ((h as f64 * s).round() as u32).max(1))
}

fn pad_rgb(img: &RgbImage, w: u32, h: u32) -> RgbImage {
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    RgbImage::from_fn(w, h, |x, y| *img.get_pixel(reflect(x as isize, iw) as u32, reflect(y as isize, ih) as u32))
}

fn pad_gray(img: &GrayImage, w: u32, h: u32) -> GrayImage {
    let (iw, ih) = (img.width() as usize, img.height() as usize);
    GrayImage::from_fn(w, h, |x, y| *img.get_pixel(reflect(x as isize, iw) as u32, reflect(y as isize, ih) as u32))
}

/// Applies fixed parameters. Images smaller than the crop after rescaling are reflect-padded.
pub fn apply(image: &RgbImage, mask: &GrayImage, crop: u32, p: &AugmentParams) -> Result<(RgbImage, GrayImage)> {
    let (mut img, mut m) = if (p.scale - 1.0).abs() < 1e-12 {
        (image.clone(), mask.clone())
    } else {
        let (w, h) = scaled(image.dimensions(), p.scale);
        (imageops::resize(image, w, h, FilterType::Triangle), imageops::resize(mask, w, h, FilterType::Nearest))
    };
    if img.width() < crop || img.height() < crop {
        log::debug!("{}x{} is smaller than the {crop} crop; reflect-padding", img.width(), img.height());
        let (w, h) = (img.width().max(crop), img.height().max(crop));
        img = pad_rgb(&img, w, h);
        m = pad_gray(&m, w, h);
    }
    let (y, x) = p.offset.unwrap_or(((img.height() - crop) / 2, (img.width() - crop) / 2));
    let (y, x) = (y.min(img.height() - crop), x.min(img.width() - crop));
    let img = imageops::crop_imm(&img, x, y, crop, crop).to_image();
    let m = imageops::crop_imm(&m, x, y, crop, crop).to_image();
    let img = jpeg_roundtrip(&img, p.quality)?;
    Ok((img, m))
}

/// Crop without rescaling or compression, used when augmentation is off.
pub fn crop_only(image: &RgbImage, mask: &GrayImage, crop: u32, offset: Option<(u32, u32)>) -> (RgbImage, GrayImage) {
    let (mut img, mut m) = (image.clone(), mask.clone());
    if img.width() < crop || img.height() < crop {
        let (w, h) = (img.width().max(crop), img.height().max(crop));
        img = pad_rgb(&img, w, h);
        m = pad_gray(&m, w, h);
    }
    if img.dimensions() == (crop, crop) {
        return (img, m);
    }
    let (y, x) = offset.unwrap_or(((img.height() - crop) / 2, (img.width() - crop) / 2));
    (imageops::crop_imm(&img, x, y, crop, crop).to_image(), imageops::crop_imm(&m, x, y, crop, crop).to_image())
}

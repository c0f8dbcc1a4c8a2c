//! Image and mask decoding, conversion to tensors, and reflective padding to the encoder's
//! size multiple.

use std::path::Path;

use image::{GrayImage, RgbImage};
use mmf_numerics::{Real, Tensor};

use crate::error::{Error, Result};

/// Spatial multiple required by the encoder.
pub const SIZE_MULTIPLE: usize = 32;

/// Mask values at or above this (8-bit scale) mark a pixel as positive.
pub const MASK_THRESHOLD: u8 = 128;

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    if !img.color().has_color() {
        log::info!("{}: grayscale input replicated to 3 channels", path.display());
    }
    Ok(img.to_rgb8())
}

/// Decodes a mask raster and binarizes it to `{0, 1}`. `inverted` flips the polarity for corpora
/// that mark authentic pixels white.
pub fn load_mask(path: &Path, inverted: bool) -> Result<GrayImage> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut m = binarize(&img.to_luma8());
    if inverted {
        m.pixels_mut().for_each(|p| p.0[0] = 1 - p.0[0]);
    }
    Ok(m)
}

pub fn binarize_value(v: u8) -> u8 {
    u8::from(v >= MASK_THRESHOLD)
}

pub fn binarize(raster: &GrayImage) -> GrayImage {
    GrayImage::from_fn(raster.width(), raster.height(), |x, y| image::Luma([binarize_value(raster.get_pixel(x, y).0[0])]))
}

/// `[1, 3, H, W]` in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[1, 3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        raw[p * 3 + c] as f32 / 255.0
    })
}

/// Inverse of [`rgb_to_tensor`] for one image of a batch; values are rounded and clamped.
pub fn tensor_to_rgb(t: &Tensor<f32>, index: usize) -> Result<RgbImage> {
    let (_, _, h, w) = t.dims4()?;
    let d = t.data();
    let base = index * 3 * h * w;
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        image::Rgb(std::array::from_fn(|c| (d[base + c * h * w + p] * 255.0).round().clamp(0.0, 255.0) as u8))
    }))
}

/// Binary mask as `[1, 1, H, W]` of zeros and ones.
pub fn mask_to_tensor(m: &GrayImage) -> Tensor<f32> {
    let (w, h) = (m.width() as usize, m.height() as usize);
    Tensor::from_fn(&[1, 1, h, w], |i| f32::from(m.as_raw()[i]))
}

/// Reflected index into `0..n` for any integer position (period `2(n-1)`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Original size of a padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
}

pub fn padded_size(n: usize) -> usize {
    n.div_ceil(SIZE_MULTIPLE).max(1) * SIZE_MULTIPLE
}

/// Reflect-pads the bottom and right of a `[N, C, H, W]` tensor to the given size.
pub fn pad_to<T: Real>(t: &Tensor<T>, ph: usize, pw: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in 0..n * c {
        let src = &d[plane * h * w..(plane + 1) * h * w];
        for y in 0..ph {
            let sy = reflect(y as isize, h);
            for x in 0..pw {
                out.push(src[sy * w + reflect(x as isize, w)]);
            }
        }
    }
    Ok(Tensor::new(&[n, c, ph, pw], out)?)
}

/// Pads to the next multiple of [`SIZE_MULTIPLE`].
pub fn pad_tensor<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, Padding)> {
    let (_, _, h, w) = t.dims4()?;
    let (ph, pw) = (padded_size(h), padded_size(w));
    let pad = Padding { height: h, width: w, padded_height: ph, padded_width: pw };
    if (ph, pw) == (h, w) {
        return Ok((t.clone(), pad));
    }
    Ok((pad_to(t, ph, pw)?, pad))
}

/// Top-left `h × w` window of a `[N, C, H, W]` tensor.
pub fn crop<T: Real>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let (n, c, th, tw) = t.dims4()?;
    if h > th || w > tw {
        return Err(crate::error::config(format!("crop {h}x{w} exceeds {th}x{tw}")));
    }
    let d = t.data();
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in 0..h {
            let row = plane * th * tw + y * tw;
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Ok(Tensor::new(&[n, c, h, w], out)?)
}

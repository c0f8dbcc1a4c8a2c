//! Fixed high-pass residuals with truncation.
//!
//! Input images are in `[0, 1]`. They are rescaled to 8-bit units before filtering so that the
//! truncation threshold is expressed in gray levels. Each output channel applies one kernel to
//! all three color channels and sums the responses.

use mmf_numerics::kernels::conv2d_forward;
use mmf_numerics::{Real, Tensor};
use serde::Deserialize;

use crate::error::{config, Result};

const KERNEL_FILE: &str = include_str!("../../data/srm_kernels.toml");

#[derive(Clone, Debug, Deserialize, PartialEq)]
pub struct SrmKernel {
    pub name: String,
    pub divisor: f64,
    pub taps: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct KernelFile {
    version: u32,
    kernel: Vec<SrmKernel>,
}

impl SrmKernel {
    pub fn height(&self) -> usize {
        self.taps.len()
    }

    pub fn width(&self) -> usize {
        self.taps.first().map_or(0, Vec::len)
    }

    pub fn tap_sum(&self) -> f64 {
        self.taps.iter().flatten().sum()
    }

    /// Divisor-scaled taps centered in a `k × k` grid.
    pub fn embedded(&self, k: usize) -> Vec<f64> {
        let (oy, ox) = ((k - self.height()) / 2, (k - self.width()) / 2);
        let mut out = vec![0.0; k * k];
        for (y, row) in self.taps.iter().enumerate() {
            for (x, &v) in row.iter().enumerate() {
                out[(y + oy) * k + x + ox] = v / self.divisor;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrmBank {
    pub kernels: Vec<SrmKernel>,
    pub threshold: f64,
}

/// Gray levels per unit of input intensity.
pub const PIXEL_SCALE: f64 = 255.0;

impl SrmBank {
    /// The three shipped kernels with the given truncation threshold.
    pub fn standard(threshold: f64) -> Result<Self> {
        let file: KernelFile = toml::from_str(KERNEL_FILE).map_err(|e| config(format!("SRM kernel file: {e}")))?;
        if file.version != 1 {
            return Err(config(format!("unsupported SRM kernel file version {}", file.version)));
        }
        Self::new(file.kernel, threshold)
    }

    pub fn new(kernels: Vec<SrmKernel>, threshold: f64) -> Result<Self> {
        if threshold <= 0.0 {
            return Err(config(format!("truncation threshold must be positive, got {threshold}")));
        }
        if kernels.len() != 3 {
            return Err(config(format!("expected 3 SRM kernels, got {}", kernels.len())));
        }
        for k in &kernels {
            let odd = k.height() % 2 == 1 && k.width() % 2 == 1;
            if !odd || k.taps.iter().any(|r| r.len() != k.width()) || k.divisor == 0.0 {
                return Err(config(format!("SRM kernel {} is malformed", k.name)));
            }
        }
        Ok(Self { kernels, threshold })
    }

    pub fn support(&self) -> usize {
        self.kernels.iter().map(|k| k.height().max(k.width())).max().unwrap_or(1)
    }

    /// Convolution weights `[3 out, 3 in, k, k]`.
    pub fn weights<T: Real>(&self) -> Tensor<T> {
        let k = self.support();
        let per: Vec<Vec<f64>> = self.kernels.iter().map(|kr| kr.embedded(k)).collect();
        Tensor::from_fn(&[3, 3, k, k], |i| T::lit(per[i / (3 * k * k)][i % (k * k)]))
    }

    /// Residual of a `[N, 3, H, W]` image batch in `[0, 1]`; spatial dims are preserved.
    pub fn residual<T: Real>(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, _, _) = image.dims4()?;
        if c != 3 {
            return Err(config(format!("SRM residual needs a 3-channel image, got {c} channels")));
        }
        let scaled = image.map(|v| v * T::lit(PIXEL_SCALE));
        let k = self.support();
        let raw = conv2d_forward(&scaled, &self.weights(), None, 1, k / 2, 1)?;
        truncate(&raw, self.threshold)
    }
}

/// Clamps every value to `[-t, t]`.
pub fn truncate<T: Real>(x: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
    if t.is_nan() || t <= 0.0 {
        return Err(config(format!("truncation threshold must be positive, got {t}")));
    }
    let t = T::lit(t);
    Ok(x.map(|v| v.max(-t).min(t)))
}

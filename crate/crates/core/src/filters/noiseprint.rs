//! Pluggable camera-noise residual source.
//!
//! Pretrained extractor outputs can be supplied as precomputed files. Without them a fixed
//! per-channel Laplacian stands in; every report marks it as a proxy.
//!
//! Precomputed file format (`<dir>/<image path relative to root>.mmfr`): the bytes `MMFR`,
//! then little-endian `u32` channels (1 or 3), height and width, then `f32` values in
//! channel-major row-major order. Single-channel maps are replicated to three channels.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use mmf_numerics::kernels::filter_planes;
use mmf_numerics::Tensor;

use crate::config::NoiseprintProvider;
use crate::error::{config, Error, Result};

const MAGIC: &[u8; 4] = b"MMFR";

/// Taps of the stand-in, applied to each color channel separately.
pub const PROXY_KERNEL: [f32; 9] = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];

#[derive(Clone, Debug)]
pub struct NoiseprintSource {
    provider: NoiseprintProvider,
}

impl NoiseprintSource {
    pub fn new(provider: NoiseprintProvider) -> Self {
        Self { provider }
    }

    pub fn is_proxy(&self) -> bool {
        matches!(self.provider, NoiseprintProvider::Proxy)
    }

    pub fn label(&self) -> &'static str {
        match self.provider {
            NoiseprintProvider::Proxy => "noiseprint-proxy (laplacian)",
            NoiseprintProvider::Precomputed { .. } => "noiseprint (precomputed)",
            NoiseprintProvider::Disabled => "noiseprint (disabled)",
        }
    }

    /// Residual of a `[1, 3, H, W]` image in `[0, 1]`. `path` identifies the image for
    /// precomputed lookups.
    pub fn residual(&self, image: &Tensor<f32>, path: Option<&Path>) -> Result<Tensor<f32>> {
        let (n, c, h, w) = image.dims4()?;
        match &self.provider {
            NoiseprintProvider::Proxy => {
                if c != 3 {
                    return Err(config(format!("noise residual needs 3 channels, got {c}")));
                }
                Ok(proxy(image)?)
            }
            NoiseprintProvider::Precomputed { .. } => {
                if n != 1 {
                    return Err(config("precomputed noise residuals are looked up one image at a time"));
                }
                let map = self.residual_unchecked(path)?;
                let (_, _, mh, mw) = map.dims4()?;
                if (mh, mw) != (h, w) {
                    return Err(config(format!("precomputed residual is {mh}x{mw} but the image is {h}x{w}")));
                }
                Ok(map)
            }
            NoiseprintProvider::Disabled => {
                Err(config("no noise residual provider configured and the proxy is disabled"))
            }
        }
    }
}

impl NoiseprintSource {
    /// Loads the precomputed map for `path` without comparing it to an image.
    pub fn residual_unchecked(&self, path: Option<&Path>) -> Result<Tensor<f32>> {
        let NoiseprintProvider::Precomputed { dir, root } = &self.provider else {
            return Err(config("noise residual source is not precomputed"));
        };
        let path = path.ok_or_else(|| config("precomputed noise residuals need the image path"))?;
        let file = residual_path(dir, root, path);
        if !file.exists() {
            return Err(Error::MissingResidual(path.to_path_buf()));
        }
        read_residual(&file)
    }
}

pub fn proxy(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    Ok(filter_planes(image, &PROXY_KERNEL, 3)?)
}

pub fn residual_path(dir: &Path, root: &Path, image: &Path) -> PathBuf {
    let rel = image.strip_prefix(root).unwrap_or(image);
    let mut name = rel.as_os_str().to_owned();
    name.push(".mmfr");
    dir.join(name)
}

pub fn write_residual(path: &Path, map: &Tensor<f32>) -> Result<()> {
    let (_, c, h, w) = map.dims4()?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    for d in [c, h, w] {
        out.write_u32::<LittleEndian>(d as u32).map_err(io)?;
    }
    for &v in &map.data()[..c * h * w] {
        out.write_f32::<LittleEndian>(v).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a residual file as `[1, 3, H, W]`.
pub fn read_residual(path: &Path) -> Result<Tensor<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |reason: String| Error::Decode { path: path.to_path_buf(), reason };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
    if &magic != MAGIC {
        return Err(bad("not a residual file".into()));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;
    }
    let [c, h, w] = dims;
    if !(c == 1 || c == 3) || h == 0 || w == 0 {
        return Err(bad(format!("unsupported residual dims {c}x{h}x{w}")));
    }
    let mut data = vec![0f32; c * h * w];
    r.read_f32_into::<LittleEndian>(&mut data).map_err(|e| bad(e.to_string()))?;
    if c == 1 {
        data = data.repeat(3);
    }
    Ok(Tensor::new(&[1, 3, h, w], data)?)
}

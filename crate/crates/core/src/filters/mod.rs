//! Forensic residual sources: fixed high-pass filters, the constrained convolution and the
//! camera-noise source.

pub mod bayar;
pub mod noiseprint;
pub mod srm;

pub use bayar::BayarLayer;
pub use noiseprint::NoiseprintSource;
pub use srm::{truncate, SrmBank};

use std::path::Path;

use mmf_numerics::Tensor;

use crate::config::{Modality, ResidualConfig};
use crate::data::ingest::pad_to;
use crate::error::Result;
use crate::model::Residuals;

/// Computes the residuals that live outside the network graph.
#[derive(Clone, Debug)]
pub struct Extractor {
    pub srm: SrmBank,
    pub noiseprint: NoiseprintSource,
    pub modalities: Vec<Modality>,
}

impl Extractor {
    pub fn new(cfg: &ResidualConfig, modalities: &[Modality]) -> Result<Self> {
        Ok(Self {
            srm: SrmBank::standard(cfg.srm_threshold)?,
            noiseprint: NoiseprintSource::new(cfg.noiseprint.clone()),
            modalities: modalities.to_vec(),
        })
    }

    /// Residuals of a `[1, 3, H, W]` image. `source` names the image file for precomputed
    /// lookups; precomputed maps are reflect-padded to the image size if it was padded.
    pub fn extract(&self, image: &Tensor<f32>, source: Option<&Path>) -> Result<Residuals<f32>> {
        let mut r = Residuals::default();
        for &m in &self.modalities {
            let t = match m {
                Modality::Srm => self.srm.residual(image)?,
                Modality::Noiseprint if self.noiseprint.is_proxy() => self.noiseprint.residual(image, source)?,
                Modality::Noiseprint => {
                    let (_, _, h, w) = image.dims4()?;
                    let map = self.noiseprint.residual_unchecked(source)?;
                    let (_, _, mh, mw) = map.dims4()?;
                    if (mh, mw) == (h, w) {
                        map
                    } else if mh <= h && mw <= w {
                        pad_to(&map, h, w)?
                    } else {
                        return Err(crate::error::config(format!("precomputed residual {mh}x{mw} exceeds image {h}x{w}")));
                    }
                }
                Modality::Bayar => continue,
            };
            r.set(m, Some(t));
        }
        Ok(r)
    }

    /// Residuals of several images stacked into one batch.
    pub fn extract_batch(&self, images: &[Tensor<f32>], sources: &[Option<&Path>]) -> Result<Residuals<f32>> {
        let each = images.iter().zip(sources).map(|(im, s)| self.extract(im, *s)).collect::<Result<Vec<_>>>()?;
        let mut out = Residuals::default();
        for &m in &self.modalities {
            if m == Modality::Bayar {
                continue;
            }
            let maps: Vec<Tensor<f32>> = each.iter().filter_map(|r| r.get(m).cloned()).collect();
            out.set(m, Some(Tensor::stack(&maps)?));
        }
        Ok(out)
    }
}

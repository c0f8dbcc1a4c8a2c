//! Multi-modal encoder in its three arrangements.
//!
//! * single: one residual paired with the image,
//! * late: one pair per residual, outputs concatenated per scale,
//! * early: the residuals are mixed by convolutional blocks first, then one pair.

pub mod dual;
pub mod efm;
pub mod ffm;
pub mod frm;
pub mod mit;

use mmf_numerics::{Graph, ParamBuilder, Real, Var};

pub use dual::{CrossModal, CrossModalTrace};
pub use efm::EarlyFusion;
pub use ffm::Fuse;
pub use frm::Rectify;
pub use mit::MixTransformer;

use crate::config::{EncoderConfig, FusionMode};
use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    /// One backbone, or one per pair when late fusion does not share it.
    pub rgb: Vec<MixTransformer>,
    pub pairs: Vec<CrossModal>,
    pub early: Option<EarlyFusion>,
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Four maps at strides 4, 8, 16 and 32.
    pub features: Vec<Var>,
    pub traces: Vec<CrossModalTrace>,
    /// Mixed auxiliary input in early fusion.
    pub mixed: Option<Var>,
}

impl Encoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let pairs_n = if cfg.fusion == FusionMode::Late { 3 } else { 1 };
        let rgb_n = if cfg.fusion == FusionMode::Late && !cfg.share_rgb { 3 } else { 1 };
        let rgb = (0..rgb_n)
            .map(|i| MixTransformer::new(&mut pb.pp(format!("rgb{i}")), cfg))
            .collect::<Result<_>>()?;
        let pairs = (0..pairs_n)
            .map(|i| CrossModal::new(&mut pb.pp(format!("pair{i}")), cfg))
            .collect::<Result<_>>()?;
        let early = match cfg.fusion {
            FusionMode::Early => Some(EarlyFusion::new(&mut pb.pp("early"), &cfg.efm_widths)?),
            _ => None,
        };
        Ok(Self { config: cfg.clone(), rgb, pairs, early })
    }

    /// Index into `rgb` of the backbone used by pair `j`.
    pub fn rgb_index(&self, j: usize) -> usize {
        j.min(self.rgb.len() - 1)
    }

    /// `image` is the normalized RGB input; `residuals` follow [`EncoderConfig::modalities`].
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var, residuals: &[Var]) -> Result<EncoderOutput> {
        let want = self.config.modalities().len();
        if residuals.len() != want {
            return Err(config(format!("encoder takes {want} residuals, got {}", residuals.len())));
        }
        let (_, _, h, w) = g.value(image).dims4()?;
        if h % 32 != 0 || w % 32 != 0 {
            return Err(config(format!(
                "input {h}x{w} must be a multiple of 32; pad to {}x{}",
                h.div_ceil(32) * 32,
                w.div_ceil(32) * 32
            )));
        }
        match self.config.fusion {
            FusionMode::Single => {
                let t = self.pairs[0].forward(g, &self.rgb[0], image, residuals[0])?;
                Ok(EncoderOutput { features: t.fused.clone(), traces: vec![t], mixed: None })
            }
            FusionMode::Early => {
                let early = self.early.as_ref().ok_or_else(|| config("early fusion blocks missing"))?;
                let mixed = early.forward(g, residuals)?;
                let t = self.pairs[0].forward(g, &self.rgb[0], image, mixed)?;
                Ok(EncoderOutput { features: t.fused.clone(), traces: vec![t], mixed: Some(mixed) })
            }
            FusionMode::Late => {
                let mut traces = Vec::with_capacity(3);
                for (j, pair) in self.pairs.iter().enumerate() {
                    let rgb = &self.rgb[self.rgb_index(j)];
                    traces.push(pair.forward(g, rgb, image, residuals[j])?);
                }
                let mut features = Vec::with_capacity(4);
                for s in 0..4 {
                    let maps: Vec<Var> = traces.iter().map(|t| t.fused[s]).collect();
                    features.push(g.concat(&maps, 1)?);
                }
                Ok(EncoderOutput { features, traces, mixed: None })
            }
        }
    }
}

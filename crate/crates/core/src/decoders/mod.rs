//! Decoding heads: re-weighting, per-pixel heads and the image-level detector.

pub mod detector;
pub mod frd;
pub mod mlp;

use mmf_numerics::{Graph, ParamBuilder, Real, Var};

pub use detector::Detector;
pub use frd::Reweight;
pub use mlp::MlpHead;

use crate::error::Result;

/// Optional per-scale re-weighting followed by an all-MLP head.
#[derive(Clone, Debug)]
pub struct PixelDecoder {
    pub reweight: Option<Vec<Reweight>>,
    pub head: MlpHead,
}

impl PixelDecoder {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, in_dims: &[usize], embed: usize, classes: usize, reweight: bool) -> Result<Self> {
        let reweight = if reweight {
            Some(
                in_dims
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| Reweight::new(&mut pb.pp(format!("reweight{}", i + 1)), c))
                    .collect::<Result<_>>()?,
            )
        } else {
            None
        };
        let head = MlpHead::new(&mut pb.pp("head"), in_dims, embed, classes)?;
        Ok(Self { reweight, head })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        let feats = match &self.reweight {
            Some(rw) => rw.iter().zip(features).map(|(r, &f)| r.forward(g, f)).collect::<Result<Vec<_>>>()?,
            None => features.to_vec(),
        };
        self.head.forward(g, &feats, out_h, out_w)
    }
}

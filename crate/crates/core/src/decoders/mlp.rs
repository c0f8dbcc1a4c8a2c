//! All-MLP segmentation head: per-scale linear embedding, upsampling to the finest scale,
//! concatenation, 1×1 fusion and a per-pixel classifier, resized to the input resolution.

use mmf_numerics::nn::{to_image, to_tokens, BatchNorm2d, Conv2d, ConvSpec, Linear};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct MlpHead {
    embeds: Vec<Linear>,
    fuse: Conv2d,
    fuse_bn: BatchNorm2d,
    classify: Conv2d,
    pub in_dims: Vec<usize>,
    pub classes: usize,
}

impl MlpHead {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, in_dims: &[usize], embed: usize, classes: usize) -> Result<Self> {
        let embeds = in_dims
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&mut pb.pp(format!("embed{}", i + 1)), c, embed, true))
            .collect();
        Ok(Self {
            embeds,
            fuse: Conv2d::new(&mut pb.pp("fuse"), ConvSpec::pointwise(in_dims.len() * embed, embed).bias(false))?,
            fuse_bn: BatchNorm2d::new(&mut pb.pp("fuse_bn"), embed),
            classify: Conv2d::new(&mut pb.pp("classify"), ConvSpec::pointwise(embed, classes))?,
            in_dims: in_dims.to_vec(),
            classes,
        })
    }

    /// Logits `[B, classes, out_h, out_w]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, features: &[Var], out_h: usize, out_w: usize) -> Result<Var> {
        if features.len() != self.embeds.len() {
            return Err(config(format!("head takes {} maps, got {}", self.embeds.len(), features.len())));
        }
        let (_, _, h1, w1) = g.value(features[0]).dims4()?;
        let mut ups = Vec::with_capacity(features.len());
        // Coarsest first.
        for (lin, &f) in self.embeds.iter().zip(features).rev() {
            let (_, _, h, w) = g.value(f).dims4()?;
            let t = to_tokens(g, f)?;
            let e = lin.forward(g, t)?;
            let e = to_image(g, e, h, w)?;
            ups.push(g.resize_bilinear(e, h1, w1)?);
        }
        let cat = g.concat(&ups, 1)?;
        let x = self.fuse.forward(g, cat)?;
        let x = self.fuse_bn.forward(g, x)?;
        let x = g.relu(x);
        let x = self.classify.forward(g, x)?;
        Ok(g.resize_bilinear(x, out_h, out_w)?)
    }
}

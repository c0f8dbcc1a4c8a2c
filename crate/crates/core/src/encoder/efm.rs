//! Early fusion: each residual passes through its own convolutional block and a final block
//! mixes the three results into one 3-channel auxiliary input.

use mmf_numerics::nn::{BatchNorm2d, Conv2d, ConvSpec};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::error::{config, Result};

/// `widths.len()` layers of 3×3 convolution, normalization and ReLU, then a 1×1 projection to
/// three channels.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    layers: Vec<(Conv2d, BatchNorm2d)>,
    out: Conv2d,
    pub in_channels: usize,
}

impl ConvBlock {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cin: usize, widths: &[usize]) -> Result<Self> {
        let mut layers = Vec::with_capacity(widths.len());
        let mut c = cin;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv2d::new(&mut pb.pp(format!("conv{i}")), ConvSpec::same(c, w, 3).bias(false))?;
            let bn = BatchNorm2d::new(&mut pb.pp(format!("bn{i}")), w);
            layers.push((conv, bn));
            c = w;
        }
        let out = Conv2d::new(&mut pb.pp("out"), ConvSpec::pointwise(c, 3))?;
        Ok(Self { layers, out, in_channels: cin })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied().unwrap_or(0);
        if c != self.in_channels {
            return Err(config(format!("fusion block expects {} channels, got {c}", self.in_channels)));
        }
        let mut h = x;
        for (conv, bn) in &self.layers {
            let y = conv.forward(g, h)?;
            let y = bn.forward(g, y)?;
            h = g.relu(y);
        }
        Ok(self.out.forward(g, h)?)
    }
}

#[derive(Clone, Debug)]
pub struct EarlyFusion {
    pub branches: Vec<ConvBlock>,
    pub mix: ConvBlock,
}

impl EarlyFusion {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, widths: &[usize]) -> Result<Self> {
        let branches = (0..3)
            .map(|i| ConvBlock::new(&mut pb.pp(format!("branch{i}")), 3, widths))
            .collect::<Result<_>>()?;
        let mix = ConvBlock::new(&mut pb.pp("mix"), 9, widths)?;
        Ok(Self { branches, mix })
    }

    /// Maps three `[B, 3, H, W]` residuals to one `[B, 3, H, W]` map.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, residuals: &[Var]) -> Result<Var> {
        if residuals.len() != self.branches.len() {
            return Err(config(format!("early fusion takes 3 residuals, got {}", residuals.len())));
        }
        let outs = self
            .branches
            .iter()
            .zip(residuals)
            .map(|(b, &r)| b.forward(g, r))
            .collect::<Result<Vec<_>>>()?;
        let cat = g.concat(&outs, 1)?;
        self.mix.forward(g, cat)
    }
}

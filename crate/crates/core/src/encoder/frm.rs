//! Cross-modal feature rectification.
//!
//! Channel gates come from globally pooled features of both branches, spatial gates from 1×1
//! convolutions over their concatenation. Each branch receives the other branch's features,
//! gated, scaled and added residually.

use mmf_numerics::nn::{Conv2d, ConvSpec, Linear};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct Rectify {
    pub channel_fc1: Linear,
    pub channel_fc2: Linear,
    pub spatial_conv1: Conv2d,
    pub spatial_conv2: Conv2d,
    pub dim: usize,
    pub lambda_c: f64,
    pub lambda_s: f64,
}

pub struct Gates {
    /// `[B, 2C]`: first half gates the image branch, second half the auxiliary branch.
    pub channel: Var,
    /// `[B, 2, H, W]`.
    pub spatial: Var,
}

impl Rectify {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, lambda_c: f64, lambda_s: f64) -> Result<Self> {
        Ok(Self {
            channel_fc1: Linear::new(&mut pb.pp("channel.fc1"), 4 * dim, 4 * dim, true),
            channel_fc2: Linear::new(&mut pb.pp("channel.fc2"), 4 * dim, 2 * dim, true),
            spatial_conv1: Conv2d::new(&mut pb.pp("spatial.conv1"), ConvSpec::pointwise(2 * dim, dim))?,
            spatial_conv2: Conv2d::new(&mut pb.pp("spatial.conv2"), ConvSpec::pointwise(dim, 2))?,
            dim,
            lambda_c,
            lambda_s,
        })
    }

    pub fn gates<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<Gates> {
        let cat = g.concat(&[x1, x2], 1)?;
        let avg = g.mean_tail(cat, 2)?;
        let max = g.max_tail(cat, 2)?;
        let pooled = g.concat(&[avg, max], 1)?;
        let h = self.channel_fc1.forward(g, pooled)?;
        let h = g.relu(h);
        let c = self.channel_fc2.forward(g, h)?;
        let channel = g.sigmoid(c);
        let s = self.spatial_conv1.forward(g, cat)?;
        let s = g.relu(s);
        let s = self.spatial_conv2.forward(g, s)?;
        let spatial = g.sigmoid(s);
        Ok(Gates { channel, spatial })
    }

    /// Returns the rectified `(image, auxiliary)` pair.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<(Var, Var)> {
        if g.shape(x1) != g.shape(x2) {
            return Err(config(format!("rectification inputs differ: {:?} vs {:?}", g.shape(x1), g.shape(x2))));
        }
        let (b, c, _, _) = g.value(x1).dims4()?;
        if c != self.dim {
            return Err(config(format!("rectification built for {} channels, got {c}", self.dim)));
        }
        let gates = self.gates(g, x1, x2)?;
        let mut out = Vec::with_capacity(2);
        // Branch 0 (image) takes gate index 1 applied to the auxiliary features and vice versa.
        for (own, other, idx) in [(x1, x2, 1usize), (x2, x1, 0usize)] {
            let cw = g.narrow(gates.channel, 1, idx * c, c)?;
            let cw = g.reshape(cw, &[b, c, 1, 1])?;
            let sw = g.narrow(gates.spatial, 1, idx, 1)?;
            let ct = g.mul(cw, other)?;
            let ct = g.mul_scalar(ct, T::lit(self.lambda_c));
            let st = g.mul(sw, other)?;
            let st = g.mul_scalar(st, T::lit(self.lambda_s));
            let y = g.add(own, ct)?;
            out.push(g.add(y, st)?);
        }
        Ok((out[0], out[1]))
    }
}

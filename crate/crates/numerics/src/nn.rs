//! Parameterized layers built on [`Graph`] operations.

use crate::error::{NumericsError, Result};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamBuilder, ParamId};
use crate::real::Real;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let weight = pb.weight("weight", &[fan_out, fan_in], Init::TruncNormal { std: 0.02 });
        let bias = bias.then(|| pb.weight("bias", &[fan_out], Init::Zeros));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride-1 convolution with "same" padding.
    pub fn same(cin: usize, cout: usize, k: usize) -> Self {
        Self { cin, cout, k, stride: 1, pad: k / 2, groups: 1, bias: true }
    }

    pub fn pointwise(cin: usize, cout: usize) -> Self {
        Self::same(cin, cout, 1)
    }

    pub fn depthwise(c: usize, k: usize) -> Self {
        Self { groups: c, ..Self::same(c, c, k) }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn pad(mut self, p: usize) -> Self {
        self.pad = p;
        self
    }

    pub fn bias(mut self, on: bool) -> Self {
        self.bias = on;
        self
    }
}

impl Conv2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, spec: ConvSpec) -> Result<Self> {
        if spec.groups == 0 || spec.cin % spec.groups != 0 || spec.cout % spec.groups != 0 {
            return Err(NumericsError::Config(format!(
                "conv groups {} must divide in {} and out {} channels",
                spec.groups, spec.cin, spec.cout
            )));
        }
        let fan_out = spec.k * spec.k * spec.cout / spec.groups;
        let std = (2.0 / fan_out as f64).sqrt();
        let weight = pb.weight("weight", &[spec.cout, spec.cin / spec.groups, spec.k, spec.k], Init::Normal { std });
        let bias = spec.bias.then(|| pb.weight("bias", &[spec.cout], Init::Zeros));
        Ok(Self { weight, bias, stride: spec.stride, pad: spec.pad, groups: spec.groups })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize) -> Self {
        Self { gamma: pb.weight("weight", &[dim], Init::Ones), beta: pb.weight("bias", &[dim], Init::Zeros) }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, Some(gm), Some(bt), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Self {
        Self {
            gamma: pb.weight("weight", &[c], Init::Ones),
            beta: pb.weight("bias", &[c], Init::Zeros),
            running_mean: pb.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: pb.buffer("running_var", Tensor::ones(&[c])),
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.batch_norm(x, Some(gm), Some(bt), self.running_mean, self.running_var, BN_MOMENTUM, BN_EPS)
    }
}

/// `[B, C, H, W]` → `[B, H·W, C]`.
pub fn to_tokens<T: Real>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let (b, c, h, w) = g.value(x).dims4()?;
    let flat = g.reshape(x, &[b, c, h * w])?;
    g.permute(flat, &[0, 2, 1])
}

/// `[B, H·W, C]` → `[B, C, H, W]`.
pub fn to_image<T: Real>(g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(NumericsError::ShapeMismatch { op: "to_image", lhs: s, rhs: vec![h, w] });
    }
    let t = g.permute(x, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// Multi-head self-attention over a token grid, with optional spatial reduction of keys and
/// values by a strided convolution (ratio `sr`).
#[derive(Clone, Debug)]
pub struct EfficientSelfAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub sr: Option<(Conv2d, LayerNorm)>,
    pub heads: usize,
    pub dim: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// Attention weights `[B, heads, N_query, N_key]`.
    pub weights: Var,
}

impl EfficientSelfAttention {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, sr_ratio: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(NumericsError::Config(format!("{heads} heads do not divide channel dim {dim}")));
        }
        let q = Linear::new(&mut pb.pp("q"), dim, dim, true);
        let kv = Linear::new(&mut pb.pp("kv"), dim, 2 * dim, true);
        let proj = Linear::new(&mut pb.pp("proj"), dim, dim, true);
        let sr = if sr_ratio > 1 {
            let conv = Conv2d::new(&mut pb.pp("sr"), ConvSpec::same(dim, dim, sr_ratio).stride(sr_ratio).pad(0))?;
            Some((conv, LayerNorm::new(&mut pb.pp("norm"), dim)))
        } else {
            None
        };
        Ok(Self { q, kv, proj, sr, heads, dim })
    }

    fn split_heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        g.permute(r, &[0, 2, 1, 3])
    }

    /// `x` holds tokens `[B, H·W, C]` of an `h × w` grid.
    pub fn forward_with_weights<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<AttentionOutput> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[1] != h * w || s[2] != self.dim {
            return Err(NumericsError::ShapeMismatch { op: "attention", lhs: s, rhs: vec![h * w, self.dim] });
        }
        let (b, n) = (s[0], s[1]);
        let q = self.q.forward(g, x)?;
        let q = self.split_heads(g, q)?;
        let src = match &self.sr {
            Some((conv, norm)) => {
                let img = to_image(g, x, h, w)?;
                let red = conv.forward(g, img)?;
                let tok = to_tokens(g, red)?;
                norm.forward(g, tok)?
            }
            None => x,
        };
        let kv = self.kv.forward(g, src)?;
        let k = g.narrow(kv, 2, 0, self.dim)?;
        let v = g.narrow(kv, 2, self.dim, self.dim)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;
        let scores = g.matmul(q, k, false, true)?;
        let scale = T::lit(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let scores = g.mul_scalar(scores, scale);
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, v, false, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, self.dim])?;
        let out = self.proj.forward(g, ctx)?;
        Ok(AttentionOutput { out, weights })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
        Ok(self.forward_with_weights(g, x, h, w)?.out)
    }
}

/// Linear → depthwise 3×3 convolution → GELU → Linear on a token grid.
#[derive(Clone, Debug)]
pub struct MixFfn {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
}

impl MixFfn {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut pb.pp("fc1"), dim, hidden, true),
            dw: Conv2d::new(&mut pb.pp("dwconv"), ConvSpec::depthwise(hidden, 3))?,
            fc2: Linear::new(&mut pb.pp("fc2"), hidden, dim, true),
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = self.fc1.forward(g, x)?;
        let img = to_image(g, y, h, w)?;
        let img = self.dw.forward(g, img)?;
        let y = to_tokens(g, img)?;
        let y = g.gelu(y);
        self.fc2.forward(g, y)
    }
}

//! Feature fusion: a cross-attention exchange between the two branches followed by a residual
//! 1×1-convolution merge into a single map.

use mmf_numerics::nn::{to_image, to_tokens, BatchNorm2d, Conv2d, ConvSpec, LayerNorm, Linear};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::error::{config, Result};

/// Per-branch projection into a pass-through half and an exchanged half.
#[derive(Clone, Debug)]
struct Side {
    proj: Linear,
    kv: Linear,
    end_proj: Linear,
    norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct Fuse {
    sides: [Side; 2],
    residual: Conv2d,
    embed_in: Conv2d,
    embed_dw: Conv2d,
    embed_out: Conv2d,
    embed_norm: BatchNorm2d,
    norm: BatchNorm2d,
    pub dim: usize,
    pub heads: usize,
}

impl Fuse {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, bias: bool) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config(format!("{heads} fusion heads do not divide {dim} channels")));
        }
        let side = |pb: &mut ParamBuilder<'_, T>, name: &str| Side {
            proj: Linear::new(&mut pb.pp(format!("{name}.proj")), dim, 2 * dim, bias),
            kv: Linear::new(&mut pb.pp(format!("{name}.kv")), dim, 2 * dim, false),
            end_proj: Linear::new(&mut pb.pp(format!("{name}.end_proj")), 2 * dim, dim, bias),
            norm: LayerNorm::new(&mut pb.pp(format!("{name}.norm")), dim),
        };
        let sides = [side(pb, "image"), side(pb, "aux")];
        Ok(Self {
            sides,
            residual: Conv2d::new(&mut pb.pp("merge.residual"), ConvSpec::pointwise(2 * dim, dim).bias(false))?,
            embed_in: Conv2d::new(&mut pb.pp("merge.embed_in"), ConvSpec::pointwise(2 * dim, dim).bias(bias))?,
            embed_dw: Conv2d::new(&mut pb.pp("merge.embed_dw"), ConvSpec::depthwise(dim, 3).bias(bias))?,
            embed_out: Conv2d::new(&mut pb.pp("merge.embed_out"), ConvSpec::pointwise(dim, dim).bias(bias))?,
            embed_norm: BatchNorm2d::new(&mut pb.pp("merge.embed_norm"), dim),
            norm: BatchNorm2d::new(&mut pb.pp("merge.norm"), dim),
            dim,
            heads,
        })
    }

    fn heads_view<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let r = g.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        Ok(g.permute(r, &[0, 2, 1, 3])?)
    }

    /// Per-head context `softmax_rows(kᵀ v · scale)` of shape `[B, heads, d, d]`,
    /// normalized over the key-channel axis.
    fn context<T: Real>(&self, g: &mut Graph<'_, T>, side: &Side, u: Var) -> Result<Var> {
        let kv = side.kv.forward(g, u)?;
        let k = g.narrow(kv, 2, 0, self.dim)?;
        let v = g.narrow(kv, 2, self.dim, self.dim)?;
        let k = self.heads_view(g, k)?;
        let v = self.heads_view(g, v)?;
        let ctx = g.matmul(k, v, true, false)?;
        let scale = T::lit(1.0 / ((self.dim / self.heads) as f64).sqrt());
        let ctx = g.mul_scalar(ctx, scale);
        Ok(g.softmax(ctx, 2)?)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x1: Var, x2: Var) -> Result<Var> {
        if g.shape(x1) != g.shape(x2) {
            return Err(config(format!("fusion inputs differ: {:?} vs {:?}", g.shape(x1), g.shape(x2))));
        }
        let (b, c, h, w) = g.value(x1).dims4()?;
        if c != self.dim {
            return Err(config(format!("fusion built for {} channels, got {c}", self.dim)));
        }
        let toks = [to_tokens(g, x1)?, to_tokens(g, x2)?];
        let mut keep = Vec::with_capacity(2);
        let mut queries = Vec::with_capacity(2);
        let mut contexts = Vec::with_capacity(2);
        for (side, &t) in self.sides.iter().zip(&toks) {
            let p = side.proj.forward(g, t)?;
            let p = g.relu(p);
            let y = g.narrow(p, 2, 0, self.dim)?;
            let u = g.narrow(p, 2, self.dim, self.dim)?;
            queries.push(self.heads_view(g, u)?);
            contexts.push(self.context(g, side, u)?);
            keep.push(y);
        }
        let mut merged = Vec::with_capacity(2);
        for i in 0..2 {
            // Each branch queries the other branch's context.
            let v = g.matmul(queries[i], contexts[1 - i], false, false)?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            let v = g.reshape(v, &[b, h * w, self.dim])?;
            let y = g.concat(&[keep[i], v], 2)?;
            let e = self.sides[i].end_proj.forward(g, y)?;
            let r = g.add(toks[i], e)?;
            merged.push(self.sides[i].norm.forward(g, r)?);
        }
        let cat = g.concat(&merged, 2)?;
        let img = to_image(g, cat, h, w)?;
        let res = self.residual.forward(g, img)?;
        let e = self.embed_in.forward(g, img)?;
        let e = self.embed_dw.forward(g, e)?;
        let e = g.relu(e);
        let e = self.embed_out.forward(g, e)?;
        let e = self.embed_norm.forward(g, e)?;
        let sum = g.add(res, e)?;
        self.norm.forward(g, sum).map_err(Into::into)
    }
}

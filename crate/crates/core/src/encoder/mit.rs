//! Hierarchical transformer backbone: four stages of overlapping patch embedding followed by
//! efficient self-attention blocks.

use mmf_numerics::nn::{to_image, to_tokens, Conv2d, ConvSpec, EfficientSelfAttention, LayerNorm, MixFfn};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::config::EncoderConfig;
use crate::error::{config, Result};

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: EfficientSelfAttention,
    pub norm2: LayerNorm,
    pub ffn: MixFfn,
}

impl Block {
    fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, dim: usize, heads: usize, sr: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            norm1: LayerNorm::new(&mut pb.pp("norm1"), dim),
            attn: EfficientSelfAttention::new(&mut pb.pp("attn"), dim, heads, sr)?,
            norm2: LayerNorm::new(&mut pb.pp("norm2"), dim),
            ffn: MixFfn::new(&mut pb.pp("ffn"), dim, dim * mlp_ratio)?,
        })
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
        let n = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, n, h, w)?;
        let x = g.add(x, a)?;
        let n = self.norm2.forward(g, x)?;
        let f = self.ffn.forward(g, n, h, w)?;
        Ok(g.add(x, f)?)
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub embed: Conv2d,
    pub embed_norm: LayerNorm,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub stride: usize,
}

impl Stage {
    /// `[B, C_in, H, W]` → `[B, C_i, H / stride, W / stride]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = g.value(x).dims4()?;
        if h % self.stride != 0 || w % self.stride != 0 {
            let ph = h.div_ceil(self.stride) * self.stride;
            let pw = w.div_ceil(self.stride) * self.stride;
            return Err(config(format!(
                "stage input {h}x{w} is not divisible by its patch stride {}; pad to {ph}x{pw}",
                self.stride
            )));
        }
        let e = self.embed.forward(g, x)?;
        let (oh, ow) = (h / self.stride, w / self.stride);
        let t = to_tokens(g, e)?;
        let mut t = self.embed_norm.forward(g, t)?;
        for b in &self.blocks {
            t = b.forward(g, t, oh, ow)?;
        }
        let t = self.norm.forward(g, t)?;
        Ok(to_image(g, t, oh, ow)?)
    }
}

#[derive(Clone, Debug)]
pub struct MixTransformer {
    pub stages: Vec<Stage>,
}

impl MixTransformer {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let mut stages = Vec::with_capacity(4);
        for i in 0..4 {
            let mut sp = pb.pp(format!("stage{}", i + 1));
            let (cin, k, stride) = if i == 0 { (3, 7, 4) } else { (cfg.dims[i - 1], 3, 2) };
            let embed = Conv2d::new(&mut sp.pp("patch_embed"), ConvSpec::same(cin, cfg.dims[i], k).stride(stride))?;
            let embed_norm = LayerNorm::new(&mut sp.pp("patch_norm"), cfg.dims[i]);
            let blocks = (0..cfg.depths[i])
                .map(|j| Block::new(&mut sp.pp(format!("block{j}")), cfg.dims[i], cfg.heads[i], cfg.sr_ratios[i], cfg.mlp_ratio))
                .collect::<Result<_>>()?;
            let norm = LayerNorm::new(&mut sp.pp("norm"), cfg.dims[i]);
            stages.push(Stage { embed, embed_norm, blocks, norm, stride });
        }
        Ok(Self { stages })
    }
}

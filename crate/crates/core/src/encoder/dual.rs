//! One image/residual encoder pair joined at every scale by rectification and fusion.

use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use super::ffm::Fuse;
use super::frm::Rectify;
use super::mit::MixTransformer;
use crate::config::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CrossModal {
    pub aux: MixTransformer,
    pub rectify: Vec<Rectify>,
    pub fuse: Vec<Fuse>,
}

/// Intermediate maps of one pass, kept for inspection.
#[derive(Clone, Debug)]
pub struct CrossModalTrace {
    pub fused: Vec<Var>,
    pub rectified: Vec<(Var, Var)>,
}

impl CrossModal {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let aux = MixTransformer::new(&mut pb.pp("aux"), cfg)?;
        let mut rectify = Vec::with_capacity(4);
        let mut fuse = Vec::with_capacity(4);
        for i in 0..4 {
            rectify.push(Rectify::new(&mut pb.pp(format!("rectify{}", i + 1)), cfg.dims[i], cfg.lambda_c, cfg.lambda_s)?);
            fuse.push(Fuse::new(&mut pb.pp(format!("fuse{}", i + 1)), cfg.dims[i], cfg.fusion_heads[i], cfg.fusion_bias)?);
        }
        Ok(Self { aux, rectify, fuse })
    }

    /// Runs both backbones in lockstep; the rectified maps feed the next stage.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, rgb: &MixTransformer, image: Var, residual: Var) -> Result<CrossModalTrace> {
        if g.shape(image) != g.shape(residual) {
            return Err(Error::Config(format!(
                "image {:?} and residual {:?} differ in shape",
                g.shape(image),
                g.shape(residual)
            )));
        }
        let (mut x, mut y) = (image, residual);
        let mut trace = CrossModalTrace { fused: Vec::with_capacity(4), rectified: Vec::with_capacity(4) };
        for i in 0..4 {
            let fx = rgb.stages[i].forward(g, x).map_err(|e| e.in_stage(format!("image stage {}", i + 1)))?;
            let fy = self.aux.stages[i].forward(g, y).map_err(|e| e.in_stage(format!("residual stage {}", i + 1)))?;
            let (rx, ry) = self.rectify[i].forward(g, fx, fy)?;
            trace.fused.push(self.fuse[i].forward(g, rx, ry)?);
            trace.rectified.push((rx, ry));
            x = rx;
            y = ry;
        }
        Ok(trace)
    }
}

//! Image-level detection from pooled localization and confidence statistics.

use mmf_numerics::nn::Linear;
use mmf_numerics::{Graph, ParamBuilder, Real, Tensor, Var};

use crate::error::{config, Result};

pub const FEATURES: usize = 6;

pub const FEATURE_NAMES: [&str; FEATURES] =
    ["loc_mean", "loc_max", "conf_mean", "conf_min", "loc_mean_conf_weighted", "loc_max_conf_weighted"];

#[derive(Clone, Debug)]
pub struct Detector {
    fc1: Linear,
    fc2: Linear,
}

impl Detector {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, hidden: usize) -> Self {
        Self { fc1: Linear::new(&mut pb.pp("fc1"), FEATURES, hidden, true), fc2: Linear::new(&mut pb.pp("fc2"), hidden, 1, true) }
    }

    /// Pools `[B, 1, H, W]` localization probabilities and confidences into `[B, 6]`.
    ///
    /// A sample whose confidence map sums to zero falls back to unweighted statistics for the
    /// two weighted entries.
    pub fn pool<T: Real>(g: &mut Graph<'_, T>, loc: Var, conf: Var) -> Result<Var> {
        if g.shape(loc) != g.shape(conf) {
            return Err(config(format!("localization {:?} and confidence {:?} differ", g.shape(loc), g.shape(conf))));
        }
        let (b, c, h, w) = g.value(loc).dims4()?;
        if c != 1 {
            return Err(config(format!("pooling expects single-channel maps, got {c}")));
        }
        let n = h * w;
        let fallback = Tensor::from_fn(&[b, 1, 1, 1], |i| {
            let s: f64 = g.value(conf).data()[i * n..(i + 1) * n].iter().map(|v| v.as_f64()).sum();
            if s <= 0.0 { T::one() } else { T::zero() }
        });
        let fallback = g.constant(fallback);
        let wconf = g.add(conf, fallback)?;

        let loc_mean = g.mean_tail(loc, 1)?;
        let loc_max = g.max_tail(loc, 1)?;
        let conf_mean = g.mean_tail(conf, 1)?;
        let neg = g.mul_scalar(conf, T::lit(-1.0));
        let neg_max = g.max_tail(neg, 1)?;
        let conf_min = g.mul_scalar(neg_max, T::lit(-1.0));
        let prod = g.mul(loc, wconf)?;
        let num = g.mean_tail(prod, 1)?;
        let den = g.mean_tail(wconf, 1)?;
        let wmean = g.div(num, den)?;
        let wmax = g.max_tail(prod, 1)?;
        let feats = [loc_mean, loc_max, conf_mean, conf_min, wmean, wmax];
        let cols = feats.iter().map(|&f| g.reshape(f, &[b, 1])).collect::<Result<Vec<_>, _>>()?;
        Ok(g.concat(&cols, 1)?)
    }

    /// Detection logits `[B, 1]` from pooled statistics.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, pooled: Var) -> Result<Var> {
        let h = self.fc1.forward(g, pooled)?;
        let h = g.relu(h);
        Ok(self.fc2.forward(g, h)?)
    }
}

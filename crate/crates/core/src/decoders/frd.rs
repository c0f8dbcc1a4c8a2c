//! Feature re-weighting: a learned per-pixel, per-channel gate in `(0, 1)` scales each
//! encoder map before decoding.

use mmf_numerics::nn::{BatchNorm2d, Conv2d, ConvSpec};
use mmf_numerics::{Graph, ParamBuilder, Real, Var};

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Reweight {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    /// Produces the gate logits.
    pub gate: Conv2d,
}

impl Reweight {
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, c: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&mut pb.pp("conv1"), ConvSpec::same(c, c, 3).bias(false))?,
            bn1: BatchNorm2d::new(&mut pb.pp("bn1"), c),
            conv2: Conv2d::new(&mut pb.pp("conv2"), ConvSpec::same(c, c, 3).bias(false))?,
            bn2: BatchNorm2d::new(&mut pb.pp("bn2"), c),
            gate: Conv2d::new(&mut pb.pp("gate"), ConvSpec::pointwise(c, c))?,
        })
    }

    pub fn weights<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let h = self.conv1.forward(g, f)?;
        let h = self.bn1.forward(g, h)?;
        let h = self.conv2.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let l = self.gate.forward(g, h)?;
        Ok(g.sigmoid(l))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, f: Var) -> Result<Var> {
        let w = self.weights(g, f)?;
        Ok(g.mul(w, f)?)
    }
}

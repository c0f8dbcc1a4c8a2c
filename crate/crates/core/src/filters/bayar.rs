//! Constrained convolution: in every `k × k` kernel slice the center tap is −1 and the other
//! taps sum to 1, so each output channel is a prediction-error filter whose response to a
//! constant image is zero.

use mmf_numerics::kernels::conv2d_forward;
use mmf_numerics::{Graph, Init, ParamBuilder, ParamId, ParamStore, Real, Tensor, Var};
use rand::{Rng, RngCore};

use crate::error::{Error, Result};

/// Off-center sums with magnitude at or below this re-initialize the slice.
pub const DEGENERATE_EPS: f64 = 1e-8;
/// Tolerance used when checking the off-center sum.
pub const CONSTRAINT_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct BayarLayer {
    pub weight: ParamId,
    pub k: usize,
    pub channels: usize,
}

impl BayarLayer {
    /// Registers a `3 → 3` layer. Weights start uniform in `[0, 1)` and are projected.
    pub fn new<T: Real>(pb: &mut ParamBuilder<'_, T>, k: usize) -> Self {
        let channels = 3;
        let weight = pb.weight("weight", &[channels, channels, k, k], Init::Uniform { lo: 0.0, hi: 1.0 });
        let layer = Self { weight, k, channels };
        let p = pb.store().get_mut(weight);
        p.decay = false;
        let mut w = p.value.clone();
        project(&mut w, pb.rng());
        pb.store().get_mut(weight).value = w;
        layer
    }

    pub fn project_in<T: Real>(&self, store: &mut ParamStore<T>, rng: &mut dyn RngCore) -> usize {
        let mut w = store.value(self.weight).clone();
        let n = project(&mut w, rng);
        store.get_mut(self.weight).value = w;
        n
    }

    pub fn check_in<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        check(store.value(self.weight))
    }

    /// Residual of a `[N, 3, H, W]` image in `[0, 1]` with spatial dims preserved.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        check(g.store().value(self.weight))?;
        self.forward_unchecked(g, image)
    }

    /// The convolution alone, without validating the constraint.
    pub fn forward_unchecked<T: Real>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let w = g.param(self.weight);
        Ok(g.conv2d(image, w, None, 1, self.k / 2, 1)?)
    }

    pub fn apply<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        apply(store.value(self.weight), image)
    }
}

/// Convolves without the graph; refuses weights that violate the constraint.
pub fn apply<T: Real>(weights: &Tensor<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
    check(weights)?;
    let k = weights.shape()[2];
    Ok(conv2d_forward(image, weights, None, 1, k / 2, 1)?)
}

fn slices(w: &Tensor<impl Real>) -> (usize, usize) {
    let s = w.shape();
    (s[0] * s[1], s[2] * s[3])
}

/// Projects every kernel slice onto the constraint set. Returns the number of slices that were
/// degenerate and had to be re-initialized.
pub fn project<T: Real>(w: &mut Tensor<T>, rng: &mut dyn RngCore) -> usize {
    let (n, kk) = slices(w);
    let center = kk / 2;
    let mut reinit = 0;
    for s in 0..n {
        let slice = &mut w.data_mut()[s * kk..(s + 1) * kk];
        let mut sum: f64 = (0..kk).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum();
        if sum.abs() <= DEGENERATE_EPS || !sum.is_finite() {
            log::warn!("bayar slice {s} has off-center sum {sum}; re-initializing");
            for (i, v) in slice.iter_mut().enumerate() {
                if i != center {
                    *v = T::lit(rng.random_range(0.0..1.0));
                }
            }
            sum = (0..kk).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum();
            reinit += 1;
        }
        for (i, v) in slice.iter_mut().enumerate() {
            *v = if i == center { -T::one() } else { T::lit(v.as_f64() / sum) };
        }
        absorb_rounding(slice, center);
    }
    reinit
}

/// Large taps lose the unit sum to rounding; push the residual into the smallest off-center tap,
/// where the representable spacing is finest.
fn absorb_rounding<T: Real>(slice: &mut [T], center: usize) {
    let Some(j) = (0..slice.len()).filter(|&i| i != center).min_by(|&a, &b| slice[a].as_f64().abs().total_cmp(&slice[b].as_f64().abs())) else {
        return;
    };
    for _ in 0..3 {
        let sum: f64 = (0..slice.len()).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum();
        let fixed = T::lit(slice[j].as_f64() + (1.0 - sum));
        if fixed == slice[j] {
            break;
        }
        slice[j] = fixed;
    }
}

/// Worst violation over all slices: `(center tap, off-center sum)` of the first bad slice.
pub fn check<T: Real>(w: &Tensor<T>) -> Result<()> {
    let (n, kk) = slices(w);
    let center = kk / 2;
    for s in 0..n {
        let slice = &w.data()[s * kk..(s + 1) * kk];
        let c = slice[center].as_f64();
        let sum: f64 = (0..kk).filter(|&i| i != center).map(|i| slice[i].as_f64()).sum();
        if c != -1.0 || (sum - 1.0).abs() > CONSTRAINT_TOL {
            return Err(Error::BayarConstraint { center: c, sum });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_taps_become_one_over_24() {
        let mut w = Tensor::<f64>::full(&[1, 1, 5, 5], 0.7);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(project(&mut w, &mut rng), 0);
        for (i, &v) in w.data().iter().enumerate() {
            if i == 12 {
                assert_eq!(v, -1.0);
            } else {
                assert!((v - 1.0 / 24.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sum_two_halves_every_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w = Tensor::<f64>::from_fn(&[1, 1, 3, 3], |i| if i == 4 { 5.0 } else { 0.25 });
        let before = w.clone();
        project(&mut w, &mut rng);
        for i in 0..9 {
            if i != 4 {
                assert!((w.data()[i] - before.data()[i] / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degenerate_slice_is_reinitialized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut w = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        assert_eq!(project(&mut w, &mut rng), 2);
        check(&w).unwrap();
    }

    #[test]
    fn near_cancelling_f32_slice_still_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut w = Tensor::<f32>::from_fn(&[8, 1, 5, 5], |_| rng.random_range(-1.0..1.0));
        for s in 0..8 {
            let slice = &mut w.data_mut()[s * 25..(s + 1) * 25];
            let sum: f64 = (0..25).filter(|&i| i != 12).map(|i| f64::from(slice[i])).sum();
            slice[0] -= (sum - 1e-4) as f32;
        }
        project(&mut w, &mut rng);
        check(&w).unwrap();
    }

    #[test]
    fn unprojected_weights_are_refused() {
        let w = Tensor::<f32>::full(&[3, 3, 5, 5], 0.1);
        let img = Tensor::<f32>::zeros(&[1, 3, 8, 8]);
        assert!(matches!(apply(&w, &img), Err(Error::BayarConstraint { .. })));
    }
}

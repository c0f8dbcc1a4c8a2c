#![allow(dead_code)]

pub mod grads;
pub mod oracles;
pub mod structure;
pub mod toy;

use mmf_numerics::{Graph, Init, ParamBuilder, ParamStore, Real, Result, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Init::Uniform { lo: -1.0, hi: 1.0 }.sample(shape, &mut rng)
}

pub fn unit_tensor<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Init::Uniform { lo: 0.0, hi: 1.0 }.sample(shape, &mut rng)
}

/// Weighted sum with fixed pseudo-random weights so every output element contributes.
pub fn probe<T: Real>(g: &mut Graph<'_, T>, y: Var) -> Result<Var> {
    let w = rand_tensor(g.shape(y), 999);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum_all(p))
}

/// Builds a component into a fresh store.
pub fn build<T: Real, M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, T>) -> M) -> (ParamStore<T>, M) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = {
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        f(&mut pb)
    };
    (store, m)
}

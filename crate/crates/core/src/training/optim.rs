//! Momentum SGD with decoupled-from-frozen weight decay.
//!
//! `v ← μ·v + (g + λ·p)`, `p ← p − lr·v`; parameters flagged `decay = false` skip the `λ·p` term
//! and frozen parameters are never touched.

use mmf_numerics::{GradStore, ParamId, ParamStore, Real, Tensor};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    /// Momentum buffers indexed by parameter id; created on first update.
    pub velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(config: SgdConfig, params: usize) -> Self {
        Self { config, velocity: vec![None; params] }
    }

    /// Applies one update and returns the ids that changed.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &GradStore<T>, lr: f64) -> Vec<ParamId> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        let lr = T::lit(lr);
        let mut touched = Vec::new();
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable() {
                continue;
            }
            let decay = p.decay && self.config.weight_decay != 0.0;
            let v = self.velocity[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for ((vi, &gi), pi) in v.data_mut().iter_mut().zip(g.data()).zip(p.value.data()) {
                let d = if decay { gi + wd * *pi } else { gi };
                *vi = mu * *vi + d;
            }
            for (pi, &vi) in p.value.data_mut().iter_mut().zip(v.data()) {
                *pi -= lr * vi;
            }
            touched.push(id);
        }
        touched
    }
}

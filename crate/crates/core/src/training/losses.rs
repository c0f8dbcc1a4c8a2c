//! Training objectives.
//!
//! * localization: class-weighted 2-class cross-entropy; each class is weighted by the inverse
//!   of its pixel frequency over the whole (effective) batch,
//! * confidence: squared error against the probability the frozen localization head assigns to
//!   the true class,
//! * detection: binary cross-entropy on the detector logit.
//!
//! Each loss takes a normalizer so that a batch split into chunks sums to the loss of the whole
//! batch.

use mmf_numerics::{Graph, Real, Tensor, Var};

use crate::error::{config, Result};

/// Per-class weights of the localization loss, computed once per effective batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassWeights {
    pub authentic: f64,
    pub manipulated: f64,
    /// Sum of per-pixel weights over the effective batch.
    pub total: f64,
}

impl ClassWeights {
    /// `w_c = N / (2 · max(n_c, 1))`. Clamping keeps an absent class from producing an infinite
    /// weight; it contributes nothing anyway.
    pub fn from_masks<'a>(masks: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let (mut pos, mut n) = (0usize, 0usize);
        for m in masks {
            pos += m.data().iter().filter(|&&v| v > 0.5).count();
            n += m.numel();
        }
        let neg = n - pos;
        let half = n as f64 / 2.0;
        let authentic = half / neg.max(1) as f64;
        let manipulated = half / pos.max(1) as f64;
        Self { authentic, manipulated, total: authentic * neg as f64 + manipulated * pos as f64 }
    }
}

/// Weighted cross-entropy of `[B, 2, H, W]` logits against a `[B, 1, H, W]` binary mask.
pub fn localization<T: Real>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<T>, w: ClassWeights) -> Result<Var> {
    let (b, c, h, wd) = g.value(logits).dims4()?;
    if c != 2 || mask.shape() != [b, 1, h, wd] {
        return Err(config(format!("logits {:?} do not match mask {:?}", g.shape(logits), mask.shape())));
    }
    let hw = h * wd;
    let m = mask.data();
    let total = if w.total > 0.0 { w.total } else { 1.0 };
    // target[b, k, p] = -w_k / total where k is the true class, 0 otherwise
    let target = Tensor::from_fn(&[b, 2, h, wd], |i| {
        let n = i / (2 * hw);
        let k = (i / hw) % 2;
        let p = i % hw;
        let y = usize::from(m[n * hw + p].as_f64() > 0.5);
        if y != k {
            T::zero()
        } else {
            let wk = if y == 1 { w.manipulated } else { w.authentic };
            T::lit(-wk / total)
        }
    });
    let lsm = g.log_softmax(logits, 1)?;
    let t = g.constant(target);
    let prod = g.mul(lsm, t)?;
    Ok(g.sum_all(prod))
}

/// Probability of the true class under the localization head: `p` where the mask is 1,
/// `1 - p` elsewhere.
pub fn true_class_probability<T: Real>(loc_prob: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(loc_prob.zip_map(mask, |p, m| if m.as_f64() > 0.5 { p } else { T::one() - p })?)
}

/// `Σ (conf - target)² / normalizer`; pass the effective-batch pixel count as normalizer.
pub fn confidence<T: Real>(g: &mut Graph<'_, T>, conf: Var, target: &Tensor<T>, normalizer: usize) -> Result<Var> {
    if g.shape(conf) != target.shape() {
        return Err(config(format!("confidence {:?} does not match target {:?}", g.shape(conf), target.shape())));
    }
    let t = g.constant(target.clone());
    let d = g.sub(conf, t)?;
    let sq = g.mul(d, d)?;
    let s = g.sum_all(sq);
    Ok(g.mul_scalar(s, T::lit(1.0 / normalizer.max(1) as f64)))
}

/// Binary cross-entropy with logits, summed over the chunk and divided by `normalizer`.
pub fn detection<T: Real>(g: &mut Graph<'_, T>, logits: Var, labels: &[f64], normalizer: usize) -> Result<Var> {
    let n = g.value(logits).numel();
    if labels.len() != n {
        return Err(config(format!("{} labels for {n} logits", labels.len())));
    }
    if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(config("detection labels must be 0 or 1"));
    }
    let target = Tensor::new(g.shape(logits), labels.iter().map(|&l| T::lit(l)).collect())?;
    let mean = g.bce_with_logits(logits, target)?;
    Ok(g.mul_scalar(mean, T::lit(n as f64 / normalizer.max(1) as f64)))
}

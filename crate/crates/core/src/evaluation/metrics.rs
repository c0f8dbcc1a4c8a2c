//! Localization and detection metrics at fixed thresholds.
//!
//! A score strictly above the threshold counts as "manipulated".

use crate::error::{Error, Result};

pub const THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `2TP / (2TP + FP + FN)`; 1 when there is nothing to find and nothing was predicted.
    pub fn f1(&self) -> f64 {
        if self.tp + self.fp + self.fn_ == 0 {
            1.0
        } else if self.tp == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / (2 * self.tp + self.fp + self.fn_) as f64
        }
    }
}

/// Confusion counts of binarized `pred` against binary `gt`; `invert` flips the prediction.
pub fn confusion(pred: &[f32], gt: &[u8], threshold: f64, invert: bool) -> Result<Confusion> {
    if pred.len() != gt.len() {
        return Err(Error::Metric(format!("prediction has {} pixels, ground truth {}", pred.len(), gt.len())));
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt) {
        if g > 1 {
            return Err(Error::Metric(format!("ground truth must be binary, found {g}")));
        }
        let positive = (f64::from(p) > threshold) != invert;
        match (positive, g == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Larger of the F1 of the prediction and of its polarity-inverted version.
pub fn pixel_f1(pred: &[f32], gt: &[u8], threshold: f64) -> Result<f64> {
    let plain = confusion(pred, gt, threshold, false)?.f1();
    let inverse = confusion(pred, gt, threshold, true)?.f1();
    Ok(plain.max(inverse))
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Metric(format!("labels must be 0 or 1, found {bad}")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!("both classes are required ({pos} positive, {neg} negative)")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney area under the ROC curve; tied pairs count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("scores contain NaN".into()));
    }
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of (1-based) midranks of the positives, accumulated in doubled units to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank_sum2 += mid2 * positives;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Mean of sensitivity and specificity.
pub fn balanced_accuracy(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let (pos, neg) = class_counts(labels)?;
    let tp = scores.iter().zip(labels).filter(|&(&s, &l)| l == 1 && s > threshold).count();
    let tn = scores.iter().zip(labels).filter(|&(&s, &l)| l == 0 && s <= threshold).count();
    Ok((tp as f64 / pos as f64 + tn as f64 / neg as f64) / 2.0)
}

//! Brute-force reference implementations of the metrics on random instances.

use mmfusion::evaluation::metrics::{auc, balanced_accuracy, confusion, pixel_f1, THRESHOLD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn f1_from_counts(tp: u64, fp: u64, fn_: u64) -> f64 {
    if tp + fp + fn_ == 0 {
        1.0
    } else if tp == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Counts each quadrant with a nested loop over a 2-D view.
fn oracle_counts(pred: &[f32], gt: &[u8], h: usize, w: usize, invert: bool) -> [u64; 4] {
    let mut c = [0u64; 4];
    for y in 0..h {
        for x in 0..w {
            let p = (pred[y * w + x] > 0.5) ^ invert;
            let g = gt[y * w + x] == 1;
            c[match (p, g) {
                (true, true) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (false, false) => 3,
            }] += 1;
        }
    }
    c
}

fn oracle_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                den += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

fn oracle_bacc(scores: &[f64], labels: &[u8]) -> f64 {
    let tp = scores.iter().zip(labels).filter(|(s, &l)| **s > 0.5 && l == 1).count() as f64;
    let tn = scores.iter().zip(labels).filter(|(s, &l)| **s <= 0.5 && l == 0).count() as f64;
    let p = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n = labels.len() as f64 - p;
    (tp / p + tn / n) / 2.0
}

/// Values on a coarse grid so that exact threshold hits and ties occur.
fn grid_value(rng: &mut ChaCha8Rng) -> f64 {
    if rng.random_bool(0.3) {
        f64::from(rng.random_range(0..=8u8)) / 8.0
    } else {
        rng.random::<f64>()
    }
}

fn labels_with_both(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    loop {
        let p = rng.random_range(0.1..0.9);
        let l: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(p))).collect();
        if l.contains(&0) && l.contains(&1) {
            return l;
        }
    }
}

pub struct OracleSummary {
    pub instances: usize,
    pub f1_mismatches: usize,
    pub auc_max_err: f64,
    pub bacc_max_err: f64,
}

pub fn run(instances: usize, seed: u64) -> OracleSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f1_mismatches = 0;
    for _ in 0..instances {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let pred: Vec<f32> = (0..h * w).map(|_| grid_value(&mut rng) as f32).collect();
        let density = rng.random_range(0.0..1.0);
        let gt: Vec<u8> = (0..h * w).map(|_| u8::from(rng.random_bool(density))).collect();
        let mut ok = true;
        for invert in [false, true] {
            let c = confusion(&pred, &gt, THRESHOLD, invert).unwrap();
            ok &= [c.tp, c.fp, c.fn_, c.tn] == oracle_counts(&pred, &gt, h, w, invert);
        }
        let [tp, fp, fn_, _] = oracle_counts(&pred, &gt, h, w, false);
        let [itp, ifp, ifn, _] = oracle_counts(&pred, &gt, h, w, true);
        let expect = f1_from_counts(tp, fp, fn_).max(f1_from_counts(itp, ifp, ifn));
        ok &= pixel_f1(&pred, &gt, THRESHOLD).unwrap() == expect;
        f1_mismatches += usize::from(!ok);
    }
    let (mut auc_max_err, mut bacc_max_err) = (0f64, 0f64);
    for _ in 0..instances {
        let n = rng.random_range(2..=200);
        let labels = labels_with_both(&mut rng, n);
        let scores: Vec<f64> = (0..n).map(|_| grid_value(&mut rng)).collect();
        auc_max_err = auc_max_err.max((auc(&scores, &labels).unwrap() - oracle_auc(&scores, &labels)).abs());
        bacc_max_err = bacc_max_err.max((balanced_accuracy(&scores, &labels, THRESHOLD).unwrap() - oracle_bacc(&scores, &labels)).abs());
    }
    OracleSummary { instances, f1_mismatches, auc_max_err, bacc_max_err }
}

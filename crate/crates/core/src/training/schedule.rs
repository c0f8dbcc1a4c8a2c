//! Polynomial learning-rate decay.

/// `lr0 · (1 − step / total)^power`, clamped to zero past the end.
pub fn poly_lr(step: usize, total: usize, lr0: f64, power: f64) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total as f64).powf(power)
}

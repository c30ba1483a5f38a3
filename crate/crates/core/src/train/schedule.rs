use std::f64::consts::PI;

/// `base_lr · ½ · (1 + cos(π · epoch / total_epochs))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> f64 {
    cosine_lr_at(epoch as f64 / total_epochs.max(1) as f64, base_lr)
}

/// Cosine curve at a fractional position in `[0, 1)`, for per-iteration schedules.
pub fn cosine_lr_at(progress: f64, base_lr: f64) -> f64 {
    base_lr * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        assert_eq!(cosine_lr(0, 200, 0.1), 0.1);
        assert!((cosine_lr(100, 200, 0.1) - 0.05).abs() < 1e-12);
        let last = 0.1 * 0.5 * (1.0 + (199.0 * PI / 200.0).cos());
        assert!((cosine_lr(199, 200, 0.1) - last).abs() < 1e-15);
        assert!((last - 6.17e-6).abs() < 1e-8);
    }
}

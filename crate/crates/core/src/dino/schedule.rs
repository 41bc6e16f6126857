use std::f64::consts::PI;

/// Learning rate for `epoch`: linear warmup from `start` to `peak`, then a
/// cosine decay to `floor` at the last epoch.
pub fn learning_rate(epoch: usize, epochs: usize, warmup: usize, start: f64, peak: f64, floor: f64) -> f64 {
    if epoch < warmup {
        return start + (peak - start) * epoch as f64 / warmup as f64;
    }
    let span = epochs.saturating_sub(warmup).max(1);
    let t = ((epoch - warmup) as f64 / span as f64).min(1.0);
    floor + (peak - floor) * 0.5 * (1.0 + (PI * t).cos())
}

/// Teacher momentum at `step` of `total`: cosine from `m0` up to 1.
pub fn teacher_momentum(step: usize, total: usize, m0: f64) -> f64 {
    let t = step as f64 / total.max(1) as f64;
    1.0 - (1.0 - m0) * ((PI * t.min(1.0)).cos() + 1.0) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let lr = |e| learning_rate(e, 100, 10, 1e-6, 1.25e-4, 1e-6);
        assert_eq!(lr(0), 1e-6);
        assert!((lr(5) - (1e-6 + 0.5 * (1.25e-4 - 1e-6))).abs() < 1e-15);
        assert!((lr(10) - 1.25e-4).abs() < 1e-15);
        assert!((lr(100) - 1e-6).abs() < 1e-15);
        assert!((11..100).all(|e| lr(e) < lr(e - 1)));
    }

    #[test]
    fn momentum_runs_from_m0_to_one() {
        assert!((teacher_momentum(0, 50, 0.996) - 0.996).abs() < 1e-15);
        assert!((teacher_momentum(50, 50, 0.996) - 1.0).abs() < 1e-15);
        assert!((teacher_momentum(25, 50, 0.996) - 0.998).abs() < 1e-12);
    }
}

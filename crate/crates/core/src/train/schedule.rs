use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine annealing
/// to exactly 0 at `total`.
pub fn lr_schedule(step: u64, total: u64, warmup: u64, peak: f64) -> Result<f64> {
    if total <= warmup {
        return Err(Error::config(format!(
            "total steps {total} must exceed warmup steps {warmup}"
        )));
    }
    if step > total {
        return Err(Error::config(format!("step {step} beyond schedule length {total}")));
    }
    if step < warmup {
        return Ok(peak * step as f64 / warmup as f64);
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    Ok(peak * 0.5 * (1.0 + (PI * progress).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        assert_eq!(lr_schedule(0, 100_000, 5000, 1e-4).unwrap(), 0.0);
        assert!((lr_schedule(2500, 100_000, 5000, 1e-4).unwrap() - 5e-5).abs() < 1e-18);
        assert_eq!(lr_schedule(5000, 100_000, 5000, 1e-4).unwrap(), 1e-4);
        assert!(lr_schedule(100_000, 100_000, 5000, 1e-4).unwrap().abs() <= 1e-12);
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(matches!(lr_schedule(0, 10, 10, 1e-4), Err(Error::Config(_))));
        assert!(matches!(lr_schedule(11, 10, 2, 1e-4), Err(Error::Config(_))));
    }

    #[test]
    fn monotone_phases() {
        let lrs: Vec<f64> = (0..=1000).map(|s| lr_schedule(s, 1000, 100, 1.0).unwrap()).collect();
        assert!(lrs[..=100].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[100..].windows(2).all(|w| w[1] <= w[0]));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-cycle policy: cosine warmup from `max_lr / div_factor` to `max_lr`
/// at step `floor(pct_start * total)`, then cosine annealing to
/// `max_lr / final_div`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OneCyclePolicy {
    pub pct_start: f64,
    pub div_factor: f64,
    pub final_div: f64,
}

impl Default for OneCyclePolicy {
    fn default() -> Self {
        OneCyclePolicy {
            pct_start: 0.3,
            div_factor: 25.0,
            final_div: 1e4,
        }
    }
}

impl OneCyclePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pct_start) {
            return Err(Error::invalid("pct_start", "must lie in [0, 1]"));
        }
        if !(self.div_factor > 0.0 && self.final_div > 0.0) {
            return Err(Error::invalid("div_factor", "divisors must be positive"));
        }
        Ok(())
    }

    pub fn peak_step(&self, total_steps: usize) -> usize {
        ((self.pct_start * total_steps as f64).floor() as usize).min(total_steps.saturating_sub(1))
    }
}

fn cosine(start: f64, end: f64, frac: f64) -> f64 {
    if frac <= 0.0 {
        return start;
    }
    end + (start - end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

pub fn one_cycle_lr(step: usize, total_steps: usize, max_lr: f64, policy: &OneCyclePolicy) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::OutOfRange(format!("step {step} not in [0, {total_steps})")));
    }
    let peak = policy.peak_step(total_steps);
    let initial = max_lr / policy.div_factor;
    let last = max_lr / policy.final_div;
    if step < peak {
        return Ok(cosine(initial, max_lr, step as f64 / peak as f64));
    }
    let span = total_steps - 1 - peak;
    if span == 0 {
        return Ok(max_lr);
    }
    let t = step - peak;
    if t == span {
        return Ok(last);
    }
    Ok(cosine(max_lr, last, t as f64 / span as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn landmark_values() {
        let p = OneCyclePolicy::default();
        let total = 8000;
        assert_eq!(one_cycle_lr(p.peak_step(total), total, 1e-4, &p).unwrap(), 1e-4);
        assert_eq!(one_cycle_lr(0, total, 1e-4, &p).unwrap(), 1e-4 / 25.0);
        assert!((one_cycle_lr(0, total, 1e-4, &p).unwrap() - 4e-6).abs() < 1e-20);
        assert_eq!(one_cycle_lr(total - 1, total, 1e-4, &p).unwrap(), 1e-4 / 1e4);
        assert!((one_cycle_lr(total - 1, total, 1e-4, &p).unwrap() - 1e-8).abs() < 1e-22);
        assert!(one_cycle_lr(total, total, 1e-4, &p).is_err());
    }

    #[test]
    fn piecewise_monotone_and_bounded() {
        let p = OneCyclePolicy::default();
        let total = 1000;
        let peak = p.peak_step(total);
        let lrs: Vec<f64> = (0..total).map(|s| one_cycle_lr(s, total, 1e-3, &p).unwrap()).collect();
        assert!(lrs[..=peak].windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs[peak..].windows(2).all(|w| w[0] >= w[1]));
        assert!(lrs.iter().all(|&l| l <= 1e-3 && l > 0.0));
        // continuity: neighbouring steps never jump by more than the full range / 50
        assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() < 1e-3 / 50.0));
    }

    #[test]
    fn tiny_schedules() {
        let p = OneCyclePolicy::default();
        assert_eq!(one_cycle_lr(0, 1, 0.1, &p).unwrap(), 0.1);
        let two: Vec<f64> = (0..2).map(|s| one_cycle_lr(s, 2, 0.1, &p).unwrap()).collect();
        assert_eq!(two, vec![0.1, 0.1 / 1e4]);
    }
}

use std::f64::consts::PI;

use super::TrainError;

/// One-cycle learning-rate shape: linear warm-up from `start_lr` to `max_lr`
/// over the first `warm_fraction` of the steps, then cosine annealing down
/// to `final_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub start_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warm_fraction: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self { start_lr: 0.005, max_lr: 0.1, final_lr: 5e-6, warm_fraction: 0.3 }
    }
}

impl OneCycle {
    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [self.start_lr, self.max_lr, self.final_lr];
        if rates.iter().any(|r| !(*r > 0.0)) || !(0.0..=1.0).contains(&self.warm_fraction) {
            return Err(TrainError::InvalidConfig(format!("bad one-cycle schedule {self:?}")));
        }
        Ok(())
    }

    /// Learning rate at `step` of a `total_steps`-long run.
    pub fn lr(&self, step: usize, total_steps: usize) -> Result<f64, TrainError> {
        if step > total_steps {
            return Err(TrainError::StepOutOfRange { step, total: total_steps });
        }
        let warm = self.warm_fraction * total_steps as f64;
        let s = step as f64;
        if s <= warm && warm > 0.0 {
            return Ok(self.start_lr + (self.max_lr - self.start_lr) * (s / warm));
        }
        let span = total_steps as f64 - warm;
        let t = if span > 0.0 { (s - warm) / span } else { 1.0 };
        Ok(self.final_lr + (self.max_lr - self.final_lr) * 0.5 * (1.0 + (PI * t).cos()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_peak() {
        let s = OneCycle::default();
        assert_eq!(s.lr(0, 1000).unwrap(), 0.005);
        assert_eq!(s.lr(300, 1000).unwrap(), 0.1);
        assert!((s.lr(1000, 1000).unwrap() - 5e-6).abs() < 1e-18);
        assert!(matches!(s.lr(1001, 1000), Err(TrainError::StepOutOfRange { .. })));
    }

    #[test]
    fn continuous_at_the_peak() {
        let s = OneCycle::default();
        let a = s.lr(299, 1000).unwrap();
        let b = s.lr(301, 1000).unwrap();
        assert!((a - 0.1).abs() < 1e-3 && (b - 0.1).abs() < 1e-3);
        let mut prev = 0.0;
        for step in 0..=300 {
            let v = s.lr(step, 1000).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        for step in 301..=1000 {
            let v = s.lr(step, 1000).unwrap();
            assert!(v <= prev);
            prev = v;
        }
    }
}

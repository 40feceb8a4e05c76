//! Linear warmup followed by cosine decay, evaluated per optimisation step.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub warmup_epochs: usize,
    pub peak: f64,
    pub floor: f64,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrSchedule {
    pub fn new(
        warmup_epochs: usize,
        peak: f64,
        floor: f64,
        total_epochs: usize,
        steps_per_epoch: usize,
    ) -> Result<Self> {
        if total_epochs <= warmup_epochs {
            return Err(Error::Config(format!(
                "total_epochs ({total_epochs}) must exceed warmup_epochs ({warmup_epochs})"
            )));
        }
        if steps_per_epoch == 0 {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if !(peak >= floor && floor >= 0.0) {
            return Err(Error::Config(format!(
                "need peak >= floor >= 0, got {peak} and {floor}"
            )));
        }
        Ok(Self {
            warmup_epochs,
            peak,
            floor,
            total_epochs,
            steps_per_epoch,
        })
    }

    pub fn warmup_steps(&self) -> usize {
        self.warmup_epochs * self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Learning rate used by optimisation step `step` (0-based). Rises
    /// linearly from 0 to `peak` at the end of the warmup epochs, then
    /// follows a half cosine down to `floor` at the last step. Steps past
    /// the end stay at `floor`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        let last = self.total_steps() - 1;
        if step <= warm && warm > 0 {
            return self.peak * (step as f64 / warm as f64);
        }
        if step >= last {
            return self.floor;
        }
        let tau = (step - warm) as f64 / (last - warm) as f64;
        self.floor + 0.5 * (self.peak - self.floor) * (1.0 + (std::f64::consts::PI * tau).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule::new(10, 1e-3, 5e-6, 100, 7).unwrap()
    }

    #[test]
    fn pinned_values() {
        let s = sched();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(70), 1e-3);
        assert_eq!(s.lr_at(699), 5e-6);
        assert_eq!(s.lr_at(10_000), 5e-6);
    }

    #[test]
    fn monotone_on_each_side_and_continuous_at_junction() {
        let s = sched();
        let w = s.warmup_steps();
        for i in 0..w {
            assert!(s.lr_at(i + 1) >= s.lr_at(i));
        }
        for i in w..s.total_steps() {
            assert!(s.lr_at(i + 1) <= s.lr_at(i));
        }
        // the cosine branch evaluated at τ = 0 equals the warmup end value
        let cos_branch = s.floor + 0.5 * (s.peak - s.floor) * 2.0;
        assert!((cos_branch - s.lr_at(w)).abs() < 1e-12);
        assert!((s.lr_at(w + 1) - s.lr_at(w)).abs() < 1e-6);
    }

    #[test]
    fn rejects_degenerate_schedules() {
        assert!(LrSchedule::new(10, 1e-3, 5e-6, 10, 4).is_err());
        assert!(LrSchedule::new(1, 1e-3, 5e-6, 10, 0).is_err());
    }
}

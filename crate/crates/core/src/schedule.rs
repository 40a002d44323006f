//! Polynomial learning-rate decay with a linear warmup ramp.
//!
//! `lr(step)` climbs linearly from 0 to the base rate over the warmup
//! window, hits the base exactly at the boundary, then decays as
//! `base * (1 - progress)^power` down to 0 at the final step.

pub const POLY_POWER: f64 = 0.9;

#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub base: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub power: f64,
}

impl LrSchedule {
    pub fn new(base: f64, warmup_steps: u64, total_steps: u64) -> Self {
        LrSchedule { base, warmup_steps, total_steps: total_steps.max(warmup_steps + 1), power: POLY_POWER }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.base * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.base * (1.0 - progress).powf(self.power)
    }
}

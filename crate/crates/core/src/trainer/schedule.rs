//! Learning-rate schedule: linear warmup from zero, then cosine decay.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub lr_init: f64,
    pub lr_final: f64,
}

impl Schedule {
    /// Learning rate used by the update at `step` (0-based).
    ///
    /// `lr(s) = lr_init * s / W` for `s <= W`, then
    /// `lr_final + (lr_init - lr_final) * (1 + cos(pi * t / T)) / 2` with
    /// `t = s - W` and `T = total - W - 1`, so the last step lands on
    /// `lr_final` exactly.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.warmup_steps;
        if step < w {
            return self.lr_init * step as f64 / w as f64;
        }
        let span = self.total_steps.saturating_sub(w + 1).max(1);
        let t = (step - w).min(span) as f64;
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (PI * t / span as f64).cos())
    }
}

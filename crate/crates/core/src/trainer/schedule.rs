use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear `start → peak` over the warmup, then cosine `peak → end`.
    WarmupCosine,
    /// Linear `start → peak` over the warmup, then held at `peak`.
    WarmupConstant,
}

/// A per-step value defined on `[0, total)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub start: f64,
    pub peak: f64,
    pub end: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn warmup_cosine(start: f64, peak: f64, end: f64, warmup: usize, total: usize) -> Self {
        Schedule {
            kind: ScheduleKind::WarmupCosine,
            start,
            peak,
            end,
            warmup: warmup.min(total),
            total,
        }
    }

    /// Cosine from `from` to `to` with no warmup.
    pub fn cosine(from: f64, to: f64, total: usize) -> Self {
        Schedule::warmup_cosine(from, from, to, 0, total)
    }

    pub fn warmup_constant(start: f64, peak: f64, warmup: usize, total: usize) -> Self {
        Schedule {
            kind: ScheduleKind::WarmupConstant,
            start,
            peak,
            end: peak,
            warmup: warmup.min(total),
            total,
        }
    }

    pub fn constant(value: f64, total: usize) -> Self {
        Schedule::warmup_constant(value, value, 0, total)
    }

    pub fn at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.start + (self.peak - self.start) * step as f64 / self.warmup as f64;
        }
        match self.kind {
            ScheduleKind::WarmupConstant => self.peak,
            ScheduleKind::WarmupCosine => {
                let span = self.total.saturating_sub(self.warmup);
                if span == 0 {
                    return self.peak;
                }
                let t = ((step - self.warmup) as f64 / span as f64).min(1.0);
                self.end + 0.5 * (self.peak - self.end) * (1.0 + (PI * t).cos())
            }
        }
    }
}

/// Peak learning rate under the linear scaling rule.
pub fn scaled_lr(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_junction() {
        let s = Schedule::warmup_cosine(0.0, 1.0, 0.1, 10, 110);
        assert_eq!(s.at(0), 0.0);
        assert_eq!(s.at(5), 0.5);
        assert_eq!(s.at(10), 1.0);
        assert!((s.at(60) - 0.55).abs() < 1e-15);
        assert!(s.at(109) > 0.1 && s.at(109) < 0.1001);
    }

    #[test]
    fn warmup_constant_holds() {
        let s = Schedule::warmup_constant(0.04, 0.07, 30, 100);
        assert_eq!(s.at(0), 0.04);
        assert!((s.at(15) - 0.055).abs() < 1e-15);
        assert_eq!(s.at(30), 0.07);
        assert_eq!(s.at(99), 0.07);
    }

    #[test]
    fn linear_scaling() {
        assert_eq!(scaled_lr(0.0005, 256), 0.0005);
        assert_eq!(scaled_lr(0.0005, 1024), 0.002);
    }

    #[test]
    fn degenerate_totals() {
        assert_eq!(Schedule::cosine(0.996, 1.0, 0).at(0), 0.996);
        assert_eq!(Schedule::warmup_cosine(0.0, 1.0, 0.0, 5, 5).at(5), 1.0);
    }
}

use serde::{Deserialize, Serialize};

use super::optim::AdamWConfig;
use super::schedule::{scaled_lr, Schedule};
use crate::encoder::{EncoderConfig, FlowPolicy};
use crate::error::{Error, Result};
use crate::numerics::Fnv;
use crate::objective::{HeadConfig, LossConfig};
use crate::patchify::ViewConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Learning rate at batch size 256; the peak is scaled linearly.
    pub base_lr: f64,
    pub min_lr: f64,
    /// Fraction of all steps spent in linear learning-rate warmup.
    pub warmup_fraction: f64,
    pub weight_decay: (f64, f64),
    /// Teacher temperature warmup `(start, end)` and the fraction of steps
    /// it spans.
    pub tau_t: (f64, f64),
    pub tau_t_warmup_fraction: f64,
    /// EMA momentum, cosine from start to end.
    pub momentum: (f64, f64),
    pub center_momentum: f64,
    /// Global gradient norm cap; 0 disables clipping.
    pub clip_grad: f64,
    pub adamw: AdamWConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            batch_size: 32,
            epochs: 50,
            base_lr: 0.0005,
            min_lr: 1e-6,
            warmup_fraction: 0.1,
            weight_decay: (0.04, 0.4),
            tau_t: (0.04, 0.07),
            tau_t_warmup_fraction: 0.3,
            momentum: (0.996, 1.0),
            center_momentum: 0.9,
            clip_grad: 3.0,
            adamw: AdamWConfig::default(),
        }
    }
}

/// Everything that determines a pretraining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub views: ViewConfig,
    pub loss: LossConfig,
    pub flow: FlowPolicy,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            views: ViewConfig::default(),
            loss: LossConfig::default(),
            flow: FlowPolicy::default(),
            optim: OptimConfig::default(),
        }
    }
}

/// Per-step hyperparameter values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedules {
    pub lr: Schedule,
    pub wd: Schedule,
    pub tau_t: Schedule,
    pub momentum: Schedule,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.views.validate()?;
        if self.views.patch != self.encoder.patch {
            return Err(Error::Config(format!(
                "views.patch {} differs from encoder.patch {}",
                self.views.patch, self.encoder.patch
            )));
        }
        if self.views.global_count < 2 {
            return Err(Error::Config("at least two global views are required".into()));
        }
        let o = &self.optim;
        if o.batch_size == 0 || o.epochs == 0 {
            return Err(Error::Config("optim.batch_size and optim.epochs must be positive".into()));
        }
        if !(o.tau_t.0 > 0.0 && o.tau_t.1 > 0.0 && self.loss.tau_s > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(self.loss.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda {} must be non-negative", self.loss.lambda)));
        }
        for (name, (a, b)) in [("momentum", o.momentum), ("weight_decay", o.weight_decay)] {
            if !(a >= 0.0 && b >= 0.0) {
                return Err(Error::Config(format!("optim.{name} endpoints must be non-negative")));
            }
        }
        if !(0.0..=1.0).contains(&o.momentum.0) || !(0.0..=1.0).contains(&o.momentum.1) {
            return Err(Error::Config("optim.momentum endpoints must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&o.center_momentum) {
            return Err(Error::Config("optim.center_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        (dataset_len / self.optim.batch_size).max(1)
    }

    pub fn schedules(&self, dataset_len: usize) -> Schedules {
        let o = &self.optim;
        let total = self.steps_per_epoch(dataset_len) * o.epochs;
        let frac = |f: f64| (f * total as f64).round() as usize;
        Schedules {
            lr: Schedule::warmup_cosine(0.0, scaled_lr(o.base_lr, o.batch_size), o.min_lr, frac(o.warmup_fraction), total),
            wd: Schedule::cosine(o.weight_decay.0, o.weight_decay.1, total),
            tau_t: Schedule::warmup_constant(o.tau_t.0, o.tau_t.1, frac(o.tau_t_warmup_fraction), total),
            momentum: Schedule::cosine(o.momentum.0, o.momentum.1, total),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv::new();
        h.write(self.to_toml().as_bytes());
        h.finish()
    }
}

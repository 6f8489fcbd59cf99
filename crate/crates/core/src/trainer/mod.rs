//! Optimiser, schedules, the per-step update and the checkpoint container.

mod config;
mod container;
mod metrics;
mod optim;
mod run;
mod schedule;
mod step;

pub use config::{OptimConfig, Schedules, TrainConfig};
pub use container::{Container, FORMAT_VERSION, MAGIC};
pub use metrics::{StepMetrics, METRICS_HEADER};
pub use optim::{clip_global_norm, AdamW, AdamWConfig};
pub use run::{train, RunOptions, RunSummary};
pub use schedule::{scaled_lr, Schedule, ScheduleKind};
pub use step::{derived_rng, student_loss, teacher_logits, teacher_targets, with_pool, TrainState};

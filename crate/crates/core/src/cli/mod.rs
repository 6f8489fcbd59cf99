//! Run configuration and the workflows behind the `adclr` executable.

mod commands;
mod config;

pub use commands::{accounting, attnmap, collapse, pretrain, probe, AttnMapArgs, ProbeReport};
pub use config::{apply_override, load_config, DatasetConfig, EvalConfig, RunConfig, ALIASES};

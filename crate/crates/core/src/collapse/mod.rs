//! A one-layer, one-head attention model trained to align two branches
//! that share most of their input rows. With full attention the branches
//! can agree by attending to the shared rows alone; restricting attention
//! to the per-branch rows removes that shortcut.

mod lab;
mod rank;

pub use lab::{
    build_instance, run_collapse, CollapseConfig, CollapseInstance, CollapseTrace, TraceRow, Verdict,
    COLLAPSE_DIVERGENCE, COLLAPSE_LOSS, COLLAPSE_RANK_FRACTION, DIVERGENCE_LOSS, STOP_LOSS,
};
pub use rank::{effective_rank, singular_values};

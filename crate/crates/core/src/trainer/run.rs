use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;

use super::metrics::{StepMetrics, METRICS_HEADER};
use super::step::TrainState;
use crate::error::{Error, Result};
use crate::patchify::Image;

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory for `metrics.csv` and checkpoints; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Save `checkpoint.bin` every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    /// Stop once the state reaches this step, even before the schedule ends.
    pub stop_at: Option<usize>,
    /// Print one progress line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub metrics: Vec<StepMetrics>,
}

impl RunSummary {
    pub fn last(&self) -> Option<&StepMetrics> {
        self.metrics.last()
    }
}

/// Runs steps from `state.step` to the end of the schedule. The metrics
/// file is created fresh at step 0 and appended to on resume, so an
/// interrupted run and an uninterrupted one leave identical files.
pub fn train(state: &mut TrainState, images: &[Image], opts: &RunOptions) -> Result<RunSummary> {
    if images.len() != state.dataset_len {
        return Err(Error::Config(format!(
            "state was built for {} images, got {}",
            state.dataset_len,
            images.len()
        )));
    }
    let end = opts.stop_at.map_or(state.total_steps(), |s| s.min(state.total_steps()));
    let mut csv = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("metrics.csv");
            let fresh = state.step == 0;
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let spe = state.steps_per_epoch();
    let mut summary = RunSummary::default();
    while state.step < end {
        let idx = state.batch_indices();
        let batch: Vec<&Image> = idx.iter().map(|&i| &images[i]).collect();
        let m = state.train_step(&batch)?;
        if let Some((f, path)) = &mut csv {
            writeln!(f, "{}", m.csv_row()).map_err(|e| Error::io(&*path, e))?;
        }
        summary.metrics.push(m);
        let epoch_done = state.step % spe == 0;
        if epoch_done && opts.verbose {
            eprintln!(
                "epoch {:>3}  step {:>6}  loss {:.4} (global {:.4}, local {:.4})  lr {:.2e}",
                m.epoch + 1,
                state.step,
                m.total_loss,
                m.global_loss,
                m.local_loss,
                m.lr
            );
        }
        if let Some(dir) = &opts.out_dir {
            let periodic = opts.checkpoint_every > 0 && epoch_done && (state.step / spe) % opts.checkpoint_every == 0;
            if periodic || state.step == end {
                state.save(&dir.join("checkpoint.bin"))?;
            }
        }
    }
    Ok(summary)
}

use std::path::PathBuf;
use std::process::ExitCode;

use adclr::cli::{self, AttnMapArgs, RunConfig};
use adclr::collapse::Verdict;
use adclr::encoder::TokenSelector;
use adclr::trainer::TrainState;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "adclr", version, about = "Query-crop self-distillation pretraining, probes and the collapse lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set lambda=0` or `--set train.optim.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(out) = &self.out {
            overrides.push(format!("out={:?}", out.display().to_string()));
        }
        Ok(cli::load_config(self.config.as_deref(), &overrides)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the encoder; writes metrics.csv, checkpoint.bin and resolved.toml.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also run the probes once training ends.
        #[arg(long)]
        probe: bool,
    },
    /// k-NN, linear and localization probes on a checkpoint's frozen teacher.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Single-layer collapse lab; prints the verdict.
    Collapse {
        #[command(flatten)]
        common: Common,
        /// Shorthand for `--set collapse.steps=N`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export one token's head-averaged attention over the patch grid.
    Attnmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Pixmap to encode; defaults to a test-split sample.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// `cls`, `raw:I` or `query:I`.
        #[arg(long, default_value = "cls")]
        token: String,
        #[arg(long, default_value_t = 8)]
        scale: usize,
    },
    /// Effective-epoch ratio of a view configuration.
    Accounting {
        #[command(flatten)]
        common: Common,
        /// Use the training view settings instead of the `[accounting]` section.
        #[arg(long)]
        from_views: bool,
    },
}

enum Outcome {
    Ok,
    Diverged,
}

fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain { common, resume, probe } => {
            let cfg = common.resolve()?;
            let (state, summary) = cli::pretrain(&cfg, resume.as_deref(), true)?;
            if let Some(m) = summary.last() {
                println!("step {} total loss {:.6}", m.step + 1, m.total_loss);
            }
            println!("wrote {}", cfg.out.display());
            if probe {
                print!("{}", cli::probe(&cfg, &state)?.summary());
            }
        }
        Command::Probe { common, checkpoint } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&cfg.out)?;
            let state = load_state(&checkpoint, &cfg)?;
            print!("{}", cli::probe(&cfg, &state)?.summary());
        }
        Command::Collapse { common, steps } => {
            let mut common = common;
            if let Some(s) = steps {
                common.overrides.push(format!("collapse.steps={s}"));
            }
            let cfg = common.resolve()?;
            cfg.write_resolved(&cfg.out)?;
            let trace = cli::collapse(&cfg)?;
            if let Some(r) = trace.last() {
                println!(
                    "step {} loss {:.3e} attn_divergence {:.3e} eff_rank {:.3}",
                    r.step, r.loss, r.attn_divergence, r.eff_rank
                );
            }
            let verdict = trace.verdict();
            println!("{verdict}");
            if verdict == Verdict::Diverged {
                return Ok(Outcome::Diverged);
            }
        }
        Command::Attnmap {
            common,
            checkpoint,
            image,
            index,
            token,
            scale,
        } => {
            let cfg = common.resolve()?;
            cfg.write_resolved(&cfg.out)?;
            let token: TokenSelector = token.parse()?;
            let state = load_state(&checkpoint, &cfg)?;
            let map = cli::attnmap(&cfg, &state, &AttnMapArgs { image, index, token, scale })?;
            print!("{}", map.to_text());
        }
        Command::Accounting { common, from_views } => {
            let mut cfg = common.resolve()?;
            if from_views {
                cfg.accounting = adclr::patchify::AccountingConfig::from_views(&cfg.train.views);
            }
            println!("{:.2}", cli::accounting(&cfg));
        }
    }
    Ok(Outcome::Ok)
}

fn load_state(path: &std::path::Path, cfg: &RunConfig) -> Result<TrainState> {
    let (state, warnings) =
        TrainState::load(path, Some(&cfg.train)).with_context(|| format!("loading {}", path.display()))?;
    for w in warnings {
        eprintln!("warning: {w}");
    }
    Ok(state)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = matches!(e.downcast_ref::<adclr::Error>(), Some(adclr::Error::Config(_)));
            ExitCode::from(if config { 1 } else { 2 })
        }
    }
}

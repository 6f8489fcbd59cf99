use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::rank::effective_rank;
use crate::encoder::FlowMode;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Final alignment loss below which a run counts as collapsed.
pub const COLLAPSE_LOSS: f64 = 1e-3;
/// Largest tolerated cross-branch attention gap for a collapsed run.
pub const COLLAPSE_DIVERGENCE: f64 = 1e-2;
/// Collapsed runs have effective rank below this fraction of `min(Q, d)`.
pub const COLLAPSE_RANK_FRACTION: f64 = 0.25;
/// Loss above which a run is declared diverged.
pub const DIVERGENCE_LOSS: f64 = 1e6;
/// Loss at which optimisation stops early.
pub const STOP_LOSS: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollapseConfig {
    pub n_raw: usize,
    pub n_query: usize,
    pub dim: usize,
    pub steps: usize,
    pub lr: f64,
    pub init_std: f64,
    pub mode: FlowMode,
    pub seed: u64,
}

impl Default for CollapseConfig {
    fn default() -> Self {
        CollapseConfig {
            n_raw: 4,
            n_query: 64,
            dim: 16,
            steps: 5000,
            lr: 0.05,
            init_std: 0.1,
            mode: FlowMode::Bidirectional,
            seed: 0,
        }
    }
}

impl CollapseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_raw == 0 || self.dim < 2 {
            return Err(Error::Config(format!(
                "collapse lab needs n_raw >= 1 and dim >= 2, got {} and {}",
                self.n_raw, self.dim
            )));
        }
        if !(self.lr >= 0.0) || !(self.init_std > 0.0) {
            return Err(Error::Config("collapse lab lr must be >= 0 and init_std > 0".into()));
        }
        Ok(())
    }
}

/// Inputs of both branches plus the attention weights. Rows are laid out
/// `[raw | query]`; the query rows are the same in both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct CollapseInstance {
    pub x_a: Tensor,
    pub x_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

fn normalized_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(Tensor::randn(&[rows, dim], 1.0, rng));
    let y = g.layernorm(x, None).expect("dim >= 2 is validated");
    g.value(y).clone()
}

pub fn build_instance(cfg: &CollapseConfig) -> Result<CollapseInstance> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, q, d) = (cfg.n_raw, cfg.n_query, cfg.dim);
    let query = normalized_rows(q, d, &mut rng);
    let raw_a = normalized_rows(n, d, &mut rng);
    let raw_b = normalized_rows(n, d, &mut rng);
    let wq = Tensor::randn(&[d, d], cfg.init_std, &mut rng);
    let wk = Tensor::randn(&[d, d], cfg.init_std, &mut rng);
    let wv = Tensor::randn(&[d, d], cfg.init_std, &mut rng);
    Ok(CollapseInstance {
        x_a: Tensor::concat_rows(&[&raw_a, &query])?,
        x_b: Tensor::concat_rows(&[&raw_b, &query])?,
        wq,
        wk,
        wv,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub attn_divergence: f64,
    pub eff_rank: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Collapsed,
    Resistant,
    Diverged,
    Undetermined,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Collapsed => "COLLAPSED",
            Verdict::Resistant => "RESISTANT",
            Verdict::Diverged => "DIVERGED",
            Verdict::Undetermined => "UNDETERMINED",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollapseTrace {
    pub config: CollapseConfig,
    pub rows: Vec<TraceRow>,
    pub diverged: bool,
}

impl CollapseTrace {
    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    /// Whether the final state meets all three collapse conditions.
    pub fn collapsed(&self) -> bool {
        let c = &self.config;
        self.last().is_some_and(|r| {
            r.loss < COLLAPSE_LOSS
                && r.attn_divergence < COLLAPSE_DIVERGENCE
                && r.eff_rank < COLLAPSE_RANK_FRACTION * rank_cap(c) as f64
        })
    }

    pub fn verdict(&self) -> Verdict {
        if self.diverged {
            Verdict::Diverged
        } else if self.config.steps == 0 {
            Verdict::Undetermined
        } else if self.collapsed() {
            Verdict::Collapsed
        } else {
            Verdict::Resistant
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,attn_divergence,eff_rank\n");
        for r in &self.rows {
            s.push_str(&format!("{},{:e},{:e},{:e}\n", r.step, r.loss, r.attn_divergence, r.eff_rank));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn rank_cap(c: &CollapseConfig) -> usize {
    let rows = if c.n_query == 0 { c.n_raw } else { c.n_query };
    rows.min(c.dim)
}

struct Forward {
    loss: Var,
    z_a: Var,
    probs_a: Vec<f64>,
    probs_b: Vec<f64>,
}

/// One branch: `LN(softmax(x·Wq (x·Wk)ᵀ / √d) · x·Wv)`. In the
/// unidirectional mode every row attends to the raw rows only.
fn branch(g: &mut Graph, x: Var, w: [Var; 3], cfg: &CollapseConfig) -> Result<(Var, Vec<f64>)> {
    let q = g.matmul(x, w[0])?;
    let k = g.matmul(x, w[1])?;
    let v = g.matmul(x, w[2])?;
    let (k, v) = match cfg.mode {
        FlowMode::Bidirectional => (k, v),
        FlowMode::Unidirectional => (g.slice_rows(k, 0, cfg.n_raw)?, g.slice_rows(v, 0, cfg.n_raw)?),
    };
    let a = g.attention(q, k, v, 1)?;
    let probs = g.attention_probs(a).map(|(_, p)| p.to_vec()).unwrap_or_default();
    Ok((g.layernorm(a, None)?, probs))
}

fn forward(g: &mut Graph, inst: &CollapseInstance, w: [Var; 3], cfg: &CollapseConfig) -> Result<Forward> {
    let xa = g.constant(inst.x_a.clone());
    let xb = g.constant(inst.x_b.clone());
    let (z_a, probs_a) = branch(g, xa, w, cfg)?;
    let (z_b, probs_b) = branch(g, xb, w, cfg)?;
    let (lo, hi) = if cfg.n_query == 0 {
        (0, cfg.n_raw)
    } else {
        (cfg.n_raw, cfg.n_raw + cfg.n_query)
    };
    let sa = g.slice_rows(z_a, lo, hi)?;
    let sb = g.slice_rows(z_b, lo, hi)?;
    let diff = g.sub(sa, sb)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.sum(sq);
    Ok(Forward {
        loss,
        z_a: sa,
        probs_a,
        probs_b,
    })
}

/// Largest gap between the branches' attention weights from query rows to
/// the shared query columns. With no shared columns in reach (the
/// unidirectional mode, or no queries) the gap is taken over the columns
/// that are attended.
fn attention_divergence(cfg: &CollapseConfig, pa: &[f64], pb: &[f64]) -> f64 {
    let rows = cfg.n_raw + cfg.n_query;
    let cols = pa.len() / rows;
    let (r0, c0) = match (cfg.mode, cfg.n_query) {
        (_, 0) => (0, 0),
        (FlowMode::Bidirectional, _) => (cfg.n_raw, cfg.n_raw),
        (FlowMode::Unidirectional, _) => (cfg.n_raw, 0),
    };
    let mut max: f64 = 0.0;
    for i in r0..rows {
        for j in c0..cols {
            max = max.max((pa[i * cols + j] - pb[i * cols + j]).abs());
        }
    }
    max
}

/// Gradient descent on the alignment loss over the shared rows, recording
/// every step. Stops after `steps` updates, once the loss falls below
/// [`STOP_LOSS`], or when it exceeds [`DIVERGENCE_LOSS`].
pub fn run_collapse(cfg: &CollapseConfig) -> Result<CollapseTrace> {
    let inst = build_instance(cfg)?;
    let mut w = [inst.wq.clone(), inst.wk.clone(), inst.wv.clone()];
    let mut rows = Vec::with_capacity(cfg.steps + 1);
    let mut diverged = false;
    for step in 0..=cfg.steps {
        let mut g = Graph::new();
        let vars = [g.param(w[0].clone()), g.param(w[1].clone()), g.param(w[2].clone())];
        let f = forward(&mut g, &inst, vars, cfg)?;
        let loss = g.value(f.loss).data()[0];
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            rows.push(TraceRow {
                step,
                loss,
                attn_divergence: f64::NAN,
                eff_rank: f64::NAN,
            });
            diverged = true;
            break;
        }
        rows.push(TraceRow {
            step,
            loss,
            attn_divergence: attention_divergence(cfg, &f.probs_a, &f.probs_b),
            eff_rank: effective_rank(g.value(f.z_a))?,
        });
        if step == cfg.steps || loss < STOP_LOSS {
            break;
        }
        let grads = g.backward(f.loss)?;
        for (t, v) in w.iter_mut().zip(vars) {
            let grad = grads.get(v).expect("weights are tracked");
            for (p, d) in t.data_mut().iter_mut().zip(grad) {
                *p -= cfg.lr * d;
            }
        }
    }
    Ok(CollapseTrace {
        config: *cfg,
        rows,
        diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: FlowMode) -> CollapseConfig {
        CollapseConfig {
            n_raw: 2,
            n_query: 8,
            dim: 4,
            steps: 20,
            mode,
            ..CollapseConfig::default()
        }
    }

    #[test]
    fn shared_rows_identical_at_init() {
        let cfg = small(FlowMode::Bidirectional);
        let inst = build_instance(&cfg).unwrap();
        assert_eq!(inst.x_a.slice_rows(2, 10), inst.x_b.slice_rows(2, 10));
        assert_ne!(inst.x_a.slice_rows(0, 2), inst.x_b.slice_rows(0, 2));
    }

    #[test]
    fn zero_steps_is_undetermined() {
        let cfg = CollapseConfig { steps: 0, ..small(FlowMode::Bidirectional) };
        let t = run_collapse(&cfg).unwrap();
        assert_eq!(t.rows.len(), 1);
        assert_eq!(t.verdict(), Verdict::Undetermined);
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = small(FlowMode::Unidirectional);
        assert_eq!(run_collapse(&cfg).unwrap(), run_collapse(&cfg).unwrap());
    }

    #[test]
    fn huge_lr_diverges_or_stays_finite() {
        let cfg = CollapseConfig { lr: 1e9, ..small(FlowMode::Bidirectional) };
        let t = run_collapse(&cfg).unwrap();
        assert!(t.rows.iter().all(|r| r.loss.is_finite() || t.diverged));
    }

    #[test]
    fn csv_header() {
        let t = run_collapse(&CollapseConfig { steps: 2, ..small(FlowMode::Bidirectional) }).unwrap();
        let csv = t.to_csv();
        assert!(csv.starts_with("step,loss,attn_divergence,eff_rank\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}

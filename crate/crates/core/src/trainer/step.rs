use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{Schedules, TrainConfig};
use super::container::Container;
use super::metrics::StepMetrics;
use super::optim::{clip_global_norm, AdamW};
use crate::encoder::{EncodeOptions, FlowPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Fnv, Graph, Params, Tensor};
use crate::objective::{adclr_loss, teacher_distribution, DistillPair, LossConfig, LossParts, Network, StudentView, TeacherView};
use crate::patchify::{build_views, patchify, Image, MultiCropBatch, View};

fn view_grid(view: &View, patch: usize) -> (usize, usize) {
    (view.image.height() / patch, view.image.width() / patch)
}

/// Teacher logits of each global view, class row first then query rows.
pub fn teacher_logits(net: &Network, teacher: &Params, batch: &MultiCropBatch, flow: FlowPolicy) -> Result<Vec<(Tensor, Option<Tensor>)>> {
    let patch = net.encoder.cfg.patch;
    let mut g = Graph::new();
    let b = teacher.bind_frozen(&mut g);
    let queries = (batch.queries.rows() > 0).then_some(&batch.queries);
    batch
        .globals
        .iter()
        .map(|v| {
            let out = net.encoder.forward(
                &mut g,
                &b,
                &patchify(&v.image, patch)?,
                view_grid(v, patch),
                queries,
                flow,
                EncodeOptions::default(),
            )?;
            let cls = net.head.forward(&mut g, &b, out.cls)?;
            let query = out.query.map(|q| net.head.forward(&mut g, &b, q)).transpose()?;
            Ok((g.value(cls).clone(), query.map(|q| g.value(q).clone())))
        })
        .collect()
}

/// Sharpened, centred teacher targets from raw teacher logits.
pub fn teacher_targets(
    logits: &[(Tensor, Option<Tensor>)],
    center: &[f64],
    query_center: &[f64],
    tau_t: f64,
) -> Result<Vec<TeacherView>> {
    logits
        .iter()
        .map(|(c, q)| {
            Ok(TeacherView {
                cls: teacher_distribution(c, center, tau_t)?,
                query: q.as_ref().map(|q| teacher_distribution(q, query_center, tau_t)).transpose()?,
            })
        })
        .collect()
}

/// Student forward over every view of one image and the combined loss.
/// Global views carry the shared query crops; local views do not.
pub fn student_loss(
    g: &mut Graph,
    net: &Network,
    b: &Bound,
    batch: &MultiCropBatch,
    teacher: &[TeacherView],
    loss: &LossConfig,
    flow: FlowPolicy,
) -> Result<LossParts> {
    let patch = net.encoder.cfg.patch;
    let queries = (batch.queries.rows() > 0).then_some(&batch.queries);
    let mut views = Vec::with_capacity(batch.view_count());
    for (i, v) in batch.globals.iter().chain(&batch.locals).enumerate() {
        let q = if i < batch.globals.len() { queries } else { None };
        let out = net.encoder.forward(g, b, &patchify(&v.image, patch)?, view_grid(v, patch), q, flow, EncodeOptions::default())?;
        let cls = net.head.forward(g, b, out.cls)?;
        let query = out.query.map(|q| net.head.forward(g, b, q)).transpose()?;
        views.push(StudentView { cls, query });
    }
    adclr_loss(g, &views, teacher, loss)
}

struct ImageResult {
    grads: Vec<Vec<f64>>,
    global: f64,
    local: f64,
    total: f64,
    teacher_logits: Vec<(Tensor, Option<Tensor>)>,
}

fn image_step(net: &Network, pair: &DistillPair, batch: &MultiCropBatch, cfg: &TrainConfig, tau_t: f64) -> Result<ImageResult> {
    let logits = teacher_logits(net, &pair.teacher, batch, cfg.flow)?;
    let targets = teacher_targets(&logits, &pair.center, &pair.query_center, tau_t)?;
    let mut g = Graph::new();
    let b = pair.student.bind(&mut g);
    let parts = student_loss(&mut g, net, &b, batch, &targets, &cfg.loss, cfg.flow)?;
    let mut grads = g.backward(parts.total)?;
    let grads = b
        .vars()
        .iter()
        .zip(pair.student.iter())
        .map(|(v, (_, _, t))| grads.take(*v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok(ImageResult {
        grads,
        global: g.value(parts.global).data()[0],
        local: parts.local.map_or(0.0, |l| g.value(l).data()[0]),
        total: g.value(parts.total).data()[0],
        teacher_logits: logits,
    })
}

/// Mutable state of a pretraining run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub net: Network,
    pub pair: DistillPair,
    pub opt: AdamW,
    pub step: usize,
    pub dataset_len: usize,
}

/// Counter-based stream for one purpose: the same `(seed, tag, a, b)`
/// always yields the same generator.
pub fn derived_rng(seed: u64, tag: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut h = Fnv::new();
    for v in [seed, tag, a, b] {
        h.write(&v.to_le_bytes());
    }
    ChaCha8Rng::seed_from_u64(h.finish())
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_VIEWS: u64 = 3;

impl TrainState {
    pub fn new(cfg: TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        if dataset_len == 0 {
            return Err(Error::Config("training set is empty".into()));
        }
        let mut rng = derived_rng(cfg.seed, TAG_INIT, 0, 0);
        let (net, params) = Network::init(cfg.encoder, cfg.head, &mut rng)?;
        let mut pair = DistillPair::new(params, cfg.head.prototypes);
        pair.center_momentum = cfg.optim.center_momentum;
        let opt = AdamW::new(cfg.optim.adamw, &pair.student);
        Ok(TrainState {
            cfg,
            net,
            pair,
            opt,
            step: 0,
            dataset_len,
        })
    }

    pub fn schedules(&self) -> Schedules {
        self.cfg.schedules(self.dataset_len)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.cfg.steps_per_epoch(self.dataset_len)
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.cfg.optim.epochs
    }

    /// Dataset indices of the batch for the current step.
    pub fn batch_indices(&self) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, within) = (self.step / spe, self.step % spe);
        let mut order: Vec<usize> = (0..self.dataset_len).collect();
        order.shuffle(&mut derived_rng(self.cfg.seed, TAG_SHUFFLE, epoch as u64, 0));
        let bs = self.cfg.optim.batch_size.min(self.dataset_len);
        order[within * bs..(within + 1) * bs].to_vec()
    }

    /// One optimisation step: views, student and teacher forwards, loss,
    /// backward, AdamW update, EMA update and center update, in that order.
    pub fn train_step(&mut self, images: &[&Image]) -> Result<StepMetrics> {
        if images.is_empty() {
            return Err(Error::invalid("train_step", "empty batch"));
        }
        let s = self.schedules();
        let (lr, wd, tau_t, m) = (s.lr.at(self.step), s.wd.at(self.step), s.tau_t.at(self.step), s.momentum.at(self.step));
        let batches = images
            .iter()
            .enumerate()
            .map(|(k, img)| build_views(img, &self.cfg.views, &mut derived_rng(self.cfg.seed, TAG_VIEWS, self.step as u64, k as u64)))
            .collect::<Result<Vec<_>>>()?;

        let (net, pair, cfg) = (&self.net, &self.pair, &self.cfg);
        let results: Vec<Result<ImageResult>> = with_pool(|| {
            batches.par_iter().map(|b| image_step(net, pair, b, cfg, tau_t)).collect()
        });
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;

        let n = results.len() as f64;
        let mut grads: Vec<Vec<f64>> = self.pair.student.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let (mut global, mut local, mut total) = (0.0, 0.0, 0.0);
        for r in &results {
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v / n;
                }
            }
            global += r.global / n;
            local += r.local / n;
            total += r.total / n;
        }
        if !total.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
            let mut h = Fnv::new();
            for b in &batches {
                for v in b.globals.iter().chain(&b.locals) {
                    for x in v.image.data() {
                        h.write(&x.to_bits().to_le_bytes());
                    }
                }
            }
            return Err(Error::NonFinite {
                location: format!(
                    "training loss at step {} (lr={lr}, wd={wd}, tau_t={tau_t}, m={m}, global={global}, local={local}, batch digest {:016x})",
                    self.step,
                    h.finish()
                ),
            });
        }
        clip_global_norm(&mut grads, self.cfg.optim.clip_grad);
        self.opt.step(&mut self.pair.student, &grads, lr, wd)?;
        self.pair.ema(m)?;
        let logits = results.iter().flat_map(|r| r.teacher_logits.iter());
        let cls: Vec<&Tensor> = logits.clone().map(|(c, _)| c).collect();
        let query: Vec<&Tensor> = logits.filter_map(|(_, q)| q.as_ref()).collect();
        self.pair.update_center(&cls)?;
        self.pair.update_query_center(&query)?;

        let metrics = StepMetrics {
            step: self.step,
            epoch: self.step / self.steps_per_epoch(),
            lr,
            wd,
            tau_t,
            m,
            global_loss: global,
            local_loss: local,
            total_loss: total,
        };
        self.step += 1;
        Ok(metrics)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("step", self.step);
        c.set("dataset_len", self.dataset_len);
        c.set("adam_t", self.opt.t);
        c.set("config_digest", format!("{:016x}", self.cfg.digest()));
        c.set("config", self.cfg.to_toml());
        c.set("rng", format!("chacha8 seed={} counter-derived", self.cfg.seed));
        for (prefix, params) in [
            ("student", &self.pair.student),
            ("teacher", &self.pair.teacher),
            ("adam_m", &self.opt.m),
            ("adam_v", &self.opt.v),
        ] {
            for (_, name, t) in params.iter() {
                c.push(format!("{prefix}/{name}"), t.clone());
            }
        }
        c.push("center", Tensor::row_vector(&self.pair.center));
        c.push("query_center", Tensor::row_vector(&self.pair.query_center));
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    /// Restores a state. Returns warnings, such as a config digest that
    /// differs from `cfg`; the configuration stored in the file wins.
    pub fn from_container(c: &Container, cfg: Option<&TrainConfig>) -> Result<(Self, Vec<String>)> {
        let stored: TrainConfig = toml::from_str(c.meta("config")?)
            .map_err(|e| Error::Checkpoint(format!("stored config unreadable: {e}")))?;
        let mut warnings = Vec::new();
        let digest = c.meta("config_digest")?;
        if let Some(cfg) = cfg {
            if format!("{:016x}", cfg.digest()) != digest {
                warnings.push(format!(
                    "config digest mismatch: checkpoint {digest}, current {:016x}; continuing with the checkpoint's config",
                    cfg.digest()
                ));
            }
        }
        let mut state = TrainState::new(stored, c.parse("dataset_len")?)?;
        state.step = c.parse("step")?;
        state.opt.t = c.parse("adam_t")?;
        let st = &mut state;
        for (prefix, params) in [
            ("student", &mut st.pair.student),
            ("teacher", &mut st.pair.teacher),
            ("adam_m", &mut st.opt.m),
            ("adam_v", &mut st.opt.v),
        ] {
            for id in params.ids().collect::<Vec<_>>() {
                let t = c.tensor(&format!("{prefix}/{}", params.name(id)))?;
                if t.shape() != params.get(id).shape() {
                    return Err(Error::Checkpoint(format!("{prefix}/{} has shape {:?}", params.name(id), t.shape())));
                }
                *params.get_mut(id) = t.clone();
            }
        }
        for (name, dst) in [("center", &mut st.pair.center), ("query_center", &mut st.pair.query_center)] {
            let t = c.tensor(name)?;
            if t.len() != dst.len() {
                return Err(Error::Checkpoint(format!("{name} length differs from head width")));
            }
            dst.copy_from_slice(t.data());
        }
        Ok((state, warnings))
    }

    pub fn load(path: &Path, cfg: Option<&TrainConfig>) -> Result<(Self, Vec<String>)> {
        TrainState::from_container(&Container::load(path)?, cfg)
    }
}

/// Runs `f` on a pool capped by `ADCLR_THREADS` when set.
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> T {
    match std::env::var("ADCLR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(f),
            Err(_) => f(),
        },
        _ => f(),
    }
}

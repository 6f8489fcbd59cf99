use std::path::{Path, PathBuf};

use super::config::RunConfig;
use crate::collapse::{run_collapse, CollapseTrace};
use crate::encoder::{attention_map, AttentionMap, EncodeOptions, TokenSelector};
use crate::error::{Error, Result};
use crate::eval::{
    extract_features, knn_probe, linear_probe, localization_probe, ExtractConfig, FeatureSource, LocalizationConfig,
    ProbeResult,
};
use crate::numerics::Graph;
use crate::patchify::{effective_epoch_ratio, patchify, sample_query_crops, Image};
use crate::trainer::{derived_rng, train, RunOptions, RunSummary, TrainState};

/// Trains on the configured dataset, writing `resolved.toml`,
/// `metrics.csv` and `checkpoint.bin` under `cfg.out`. With `resume` the
/// run continues from that checkpoint.
pub fn pretrain(cfg: &RunConfig, resume: Option<&Path>, verbose: bool) -> Result<(TrainState, RunSummary)> {
    cfg.write_resolved(&cfg.out)?;
    let (train_set, _) = cfg.dataset.load()?;
    let mut state = match resume {
        Some(p) => {
            let (state, warnings) = TrainState::load(p, Some(&cfg.train))?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            state
        }
        None => TrainState::new(cfg.train.clone(), train_set.len())?,
    };
    let opts = RunOptions {
        out_dir: Some(cfg.out.clone()),
        checkpoint_every: cfg.checkpoint_every,
        stop_at: None,
        verbose,
    };
    let summary = train(&mut state, &train_set.images(), &opts)?;
    Ok((state, summary))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub knn: ProbeResult,
    pub linear: ProbeResult,
    pub localization: ProbeResult,
}

impl ProbeReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("probe,accuracy,samples,config_digest\n");
        for (name, r) in [("knn", &self.knn), ("linear", &self.linear), ("localization", &self.localization)] {
            s.push_str(&format!("{name},{:.6},{},{:016x}\n", r.accuracy, r.total(), r.config_digest));
        }
        s
    }

    pub fn summary(&self) -> String {
        [self.knn.summary("k-NN"), self.linear.summary("linear"), self.localization.summary("localization")].concat()
    }
}

/// Frozen-teacher probes on the configured dataset. Writes feature banks,
/// `probe.csv` and `probe.txt` under `cfg.out`. Fails if the parameters
/// change while probing.
pub fn probe(cfg: &RunConfig, state: &TrainState) -> Result<ProbeReport> {
    let (train_set, test_set) = cfg.dataset.load()?;
    let params = &state.pair.teacher;
    let before = params.digest();
    let extract = ExtractConfig {
        resolution: cfg.eval_resolution(),
        flow: state.cfg.flow,
    };
    let classes = train_set.classes.max(test_set.classes);
    let bank = |ds: &crate::datasets::Dataset| {
        extract_features(&state.net, params, &ds.images(), &ds.labels(), classes, FeatureSource::Cls, &extract)
    };
    let (tr, te) = (bank(&train_set)?, bank(&test_set)?);
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    tr.to_container().save(&cfg.out.join("features_train.bin"))?;
    te.to_container().save(&cfg.out.join("features_test.bin"))?;
    let knn = knn_probe(&tr, &te, cfg.eval.knn_k, cfg.eval.knn_temperature)?;
    let linear = linear_probe(&tr, &te, &cfg.eval.linear)?;
    let masks: Vec<_> = test_set.samples.iter().map(|s| s.mask.clone()).collect();
    let loc_cfg = LocalizationConfig {
        extract,
        ..cfg.eval.localization
    };
    let localization = localization_probe(&state.net, params, &test_set.images(), &masks, &loc_cfg)?;
    if params.digest() != before {
        return Err(Error::invalid("probe", "encoder parameters changed during probing"));
    }
    let report = ProbeReport { knn, linear, localization };
    let csv = cfg.out.join("probe.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let txt = cfg.out.join("probe.txt");
    std::fs::write(&txt, report.summary()).map_err(|e| Error::io(&txt, e))?;
    Ok(report)
}

/// Runs the collapse lab and writes `collapse_trace.csv` under `cfg.out`.
pub fn collapse(cfg: &RunConfig) -> Result<CollapseTrace> {
    let trace = run_collapse(&cfg.collapse)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    trace.write_csv(&cfg.out.join("collapse_trace.csv"))?;
    Ok(trace)
}

pub fn accounting(cfg: &RunConfig) -> f64 {
    effective_epoch_ratio(&cfg.accounting)
}

#[derive(Debug, Clone)]
pub struct AttnMapArgs {
    /// A pixmap file; when unset, test sample `index` of the dataset is used.
    pub image: Option<PathBuf>,
    pub index: usize,
    pub token: TokenSelector,
    /// Pixels per grid cell in the written image.
    pub scale: usize,
}

/// Head-averaged last-block attention of one token with the teacher
/// weights. Writes `attn_<token>.txt` and `attn_<token>.pgm` under `cfg.out`.
pub fn attnmap(cfg: &RunConfig, state: &TrainState, args: &AttnMapArgs) -> Result<AttentionMap> {
    let img = match &args.image {
        Some(p) => Image::read_pnm(p)?,
        None => {
            let (_, test) = cfg.dataset.load()?;
            test.samples
                .get(args.index)
                .ok_or_else(|| Error::Config(format!("test split has no sample {}", args.index)))?
                .image
                .clone()
        }
    };
    let res = cfg.eval_resolution();
    let img = if img.height() == res && img.width() == res { img } else { img.resize_bilinear(res, res) };
    let patch = state.net.encoder.cfg.patch;
    let queries = match args.token {
        TokenSelector::Query(i) => {
            let mut rng = derived_rng(cfg.seed, 0x41, args.index as u64, 0);
            let n = (i + 1).max(state.cfg.views.query_count);
            Some(sample_query_crops(&img, n, state.cfg.views.local_scale(), patch, &mut rng)?.0)
        }
        _ => None,
    };
    let mut g = Graph::new();
    let b = state.pair.teacher.bind_frozen(&mut g);
    let out = state.net.encoder.forward(
        &mut g,
        &b,
        &patchify(&img, patch)?,
        (img.height() / patch, img.width() / patch),
        queries.as_ref(),
        state.cfg.flow,
        EncodeOptions { retain_attention: true },
    )?;
    let map = attention_map(&g, &out, args.token)?;
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let stem = match args.token {
        TokenSelector::Cls => "cls".to_string(),
        TokenSelector::Raw(i) => format!("raw{i}"),
        TokenSelector::Query(i) => format!("query{i}"),
    };
    map.write(
        &cfg.out.join(format!("attn_{stem}.txt")),
        Some((&cfg.out.join(format!("attn_{stem}.pgm")), args.scale)),
    )?;
    Ok(map)
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::features::{digest_f64s, patch_features, ExtractConfig, FeatureBank, FeatureSource};
use crate::datasets::Mask;
use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};
use crate::objective::Network;

/// Accuracy with the confusion counts it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// `None` for classes absent from the evaluation set.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<usize>>,
    pub config_digest: u64,
}

impl ProbeResult {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize, config_digest: u64) -> Result<Self> {
        if truth.len() != predicted.len() || truth.is_empty() {
            return Err(Error::shape(
                "probe_result",
                format!("{} labels, {} predictions", truth.len(), predicted.len()),
            ));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::invalid("probe_result", format!("label outside 0..{classes}")));
            }
            confusion[t][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Ok(ProbeResult {
            accuracy: correct as f64 / truth.len() as f64,
            per_class,
            confusion,
            config_digest,
        })
    }

    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// `class,count,accuracy` lines followed by an `all` line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,count,accuracy\n");
        for (c, row) in self.confusion.iter().enumerate() {
            let acc = self.per_class[c].map_or(String::from("nan"), |a| format!("{a:.6}"));
            let _ = writeln!(s, "{c},{},{acc}", row.iter().sum::<usize>());
        }
        let _ = writeln!(s, "all,{},{:.6}", self.total(), self.accuracy);
        s
    }

    pub fn summary(&self, name: &str) -> String {
        let mut s = format!("{name}: top-1 {:.4} over {} samples (config {:016x})\n", self.accuracy, self.total(), self.config_digest);
        for (c, row) in self.confusion.iter().enumerate() {
            let _ = writeln!(s, "  class {c}: {row:?}");
        }
        s
    }
}

fn check_dims(train: &FeatureBank, test: &FeatureBank, op: &'static str) -> Result<()> {
    if train.dim() != test.dim() {
        return Err(Error::shape(op, format!("train width {} but test width {}", train.dim(), test.dim())));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(op, "empty feature bank"));
    }
    Ok(())
}

fn unit_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows())
        .map(|i| {
            let r = t.row(i);
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                r.to_vec()
            }
        })
        .collect()
}

/// Cosine-similarity k-NN with `exp(sim / temperature)` vote weights. An
/// infinite temperature gives uniform weights. Ties in similarity go to the
/// earlier training row, ties in votes to the smaller label.
pub fn knn_probe(train: &FeatureBank, test: &FeatureBank, k: usize, temperature: f64) -> Result<ProbeResult> {
    check_dims(train, test, "knn_probe")?;
    if k == 0 || k > train.len() {
        return Err(Error::invalid("knn_probe", format!("k={k} must lie in 1..={}", train.len())));
    }
    if !(temperature > 0.0) {
        return Err(Error::invalid("knn_probe", format!("temperature {temperature} must be positive")));
    }
    let classes = train.classes.max(test.classes);
    let (tr, te) = (unit_rows(&train.features), unit_rows(&test.features));
    let mut order: Vec<usize> = Vec::with_capacity(tr.len());
    let predicted: Vec<usize> = te
        .iter()
        .map(|q| {
            let sims: Vec<f64> = tr.iter().map(|r| r.iter().zip(q).map(|(a, b)| a * b).sum()).collect();
            order.clear();
            order.extend(0..tr.len());
            order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
            let mut votes = vec![0.0; classes];
            for &j in &order[..k] {
                votes[train.labels[j]] += (sims[j] / temperature).exp();
            }
            argmax(&votes)
        })
        .collect();
    let digest = digest_f64s([k as f64, temperature, train.len() as f64, train.dim() as f64]);
    ProbeResult::from_predictions(&test.labels, &predicted, classes, digest)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for LinearProbeConfig {
    fn default() -> Self {
        LinearProbeConfig {
            epochs: 300,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

/// Multinomial logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `dim × classes`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
}

impl LinearModel {
    /// Full-batch gradient descent with heavy-ball momentum, from zeros.
    pub fn fit(train: &FeatureBank, cfg: &LinearProbeConfig) -> Result<Self> {
        let present = {
            let mut seen = vec![false; train.classes];
            for &l in &train.labels {
                seen[l] = true;
            }
            seen.iter().filter(|&&s| s).count()
        };
        if present < 2 {
            return Err(Error::invalid("linear_probe", "training labels contain fewer than two classes"));
        }
        let (n, d, c) = (train.len(), train.dim(), train.classes);
        let x = &train.features;
        let mean: Vec<f64> = (0..d).map(|j| (0..n).map(|i| x.at(i, j)).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let var = (0..n).map(|i| (x.at(i, j) - mean[j]).powi(2)).sum::<f64>() / n as f64;
                if var > 1e-24 { 1.0 / var.sqrt() } else { 0.0 }
            })
            .collect();
        let mut model = LinearModel {
            mean,
            scale,
            weight: vec![0.0; d * c],
            bias: vec![0.0; c],
            classes: c,
        };
        let xs: Vec<Vec<f64>> = (0..n).map(|i| model.standardize(x.row(i))).collect();
        let (mut vw, mut vb) = (vec![0.0; d * c], vec![0.0; c]);
        let mut p = vec![0.0; c];
        for _ in 0..cfg.epochs {
            let (mut gw, mut gb) = (vec![0.0; d * c], vec![0.0; c]);
            for (row, &y) in xs.iter().zip(&train.labels) {
                model.probs(row, &mut p);
                p[y] -= 1.0;
                for (j, &xv) in row.iter().enumerate() {
                    for k in 0..c {
                        gw[j * c + k] += xv * p[k];
                    }
                }
                for k in 0..c {
                    gb[k] += p[k];
                }
            }
            for (i, g) in gw.iter_mut().enumerate() {
                *g = *g / n as f64 + cfg.weight_decay * model.weight[i];
            }
            for (w, (v, g)) in model.weight.iter_mut().zip(vw.iter_mut().zip(&gw)) {
                *v = cfg.momentum * *v + g;
                *w -= cfg.lr * *v;
            }
            for (b, (v, g)) in model.bias.iter_mut().zip(vb.iter_mut().zip(&gb)) {
                *v = cfg.momentum * *v + g / n as f64;
                *b -= cfg.lr * *v;
            }
        }
        Ok(model)
    }

    fn standardize(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn probs(&self, xs: &[f64], out: &mut [f64]) {
        let c = self.classes;
        for k in 0..c {
            out[k] = self.bias[k] + xs.iter().enumerate().map(|(j, v)| v * self.weight[j * c + k]).sum::<f64>();
        }
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in out.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in out.iter_mut() {
            *v /= z;
        }
    }

    pub fn predict(&self, row: &[f64]) -> usize {
        let mut p = vec![0.0; self.classes];
        self.probs(&self.standardize(row), &mut p);
        argmax(&p)
    }
}

/// Fits on `train`, reports accuracy on `test`.
pub fn linear_probe(train: &FeatureBank, test: &FeatureBank, cfg: &LinearProbeConfig) -> Result<ProbeResult> {
    check_dims(train, test, "linear_probe")?;
    let model = LinearModel::fit(train, cfg)?;
    let classes = train.classes.max(test.classes);
    let predicted: Vec<usize> = (0..test.len()).map(|i| model.predict(test.features.row(i))).collect();
    let digest = digest_f64s([cfg.epochs as f64, cfg.lr, cfg.momentum, cfg.weight_decay, train.len() as f64]);
    ProbeResult::from_predictions(&test.labels, &predicted, classes, digest)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalizationConfig {
    /// Leading fraction of images whose patches train the probe.
    pub train_fraction: f64,
    pub extract: ExtractConfig,
    pub linear: LinearProbeConfig,
}

impl Default for LocalizationConfig {
    fn default() -> Self {
        LocalizationConfig {
            train_fraction: 0.8,
            extract: ExtractConfig::default(),
            linear: LinearProbeConfig::default(),
        }
    }
}

/// Patch-level object/background classification from per-patch features.
/// `features[i]` holds one row per patch of image `i` on `grid`; labels are
/// the mask majority of each patch's pixel block.
pub fn patch_probe(features: &[Tensor], grid: (usize, usize), masks: &[Mask], cfg: &LocalizationConfig) -> Result<ProbeResult> {
    if features.len() != masks.len() || features.len() < 2 {
        return Err(Error::shape(
            "localization_probe",
            format!("{} feature sets for {} masks", features.len(), masks.len()),
        ));
    }
    let n_train = ((features.len() as f64 * cfg.train_fraction).round() as usize).clamp(1, features.len() - 1);
    let mut banks = Vec::with_capacity(2);
    for range in [0..n_train, n_train..features.len()] {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in range {
            if features[i].rows() != grid.0 * grid.1 {
                return Err(Error::shape(
                    "localization_probe",
                    format!("image {i} has {} patch rows for a {grid:?} grid", features[i].rows()),
                ));
            }
            rows.push(features[i].clone());
            labels.extend(masks[i].grid_labels(grid.0, grid.1)?.into_iter().map(usize::from));
        }
        let feats = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>())?;
        banks.push(FeatureBank::new(feats, labels, 2, FeatureSource::Patches)?);
    }
    linear_probe(&banks[0], &banks[1], &cfg.linear)
}

/// Encodes every image with the frozen network and runs [`patch_probe`].
pub fn localization_probe(
    net: &Network,
    params: &Params,
    images: &[crate::patchify::Image],
    masks: &[Mask],
    cfg: &LocalizationConfig,
) -> Result<ProbeResult> {
    let (features, grid) = patch_features(net, params, images, &cfg.extract)?;
    patch_probe(&features, grid, masks, cfg)
}

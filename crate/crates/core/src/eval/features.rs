use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodeOptions, FlowPolicy};
use crate::error::{Error, Result};
use crate::numerics::{Fnv, Graph, Params, Tensor};
use crate::objective::Network;
use crate::patchify::{patchify, Image};
use crate::trainer::{with_pool, Container};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Cls,
    /// Mean of the raw patch rows.
    Patches,
}

impl FeatureSource {
    fn as_str(self) -> &'static str {
        match self {
            FeatureSource::Cls => "cls",
            FeatureSource::Patches => "patches",
        }
    }
}

/// Labelled feature rows of equal width.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub source: FeatureSource,
}

impl FeatureBank {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, source: FeatureSource) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::shape(
                "feature_bank",
                format!("{:?} features for {} labels", features.shape(), labels.len()),
            ));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("feature_bank", format!("label {l} outside 0..{classes}")));
        }
        Ok(FeatureBank {
            features,
            labels,
            classes,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("kind", "feature_bank");
        c.set("classes", self.classes);
        c.set("source", self.source.as_str());
        c.push("features", self.features.clone());
        c.push("labels", Tensor::row_vector(&self.labels.iter().map(|&l| l as f64).collect::<Vec<_>>()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.meta("kind")? != "feature_bank" {
            return Err(Error::Checkpoint("container does not hold a feature bank".into()));
        }
        let source = match c.meta("source")? {
            "cls" => FeatureSource::Cls,
            "patches" => FeatureSource::Patches,
            s => return Err(Error::Checkpoint(format!("unknown feature source {s:?}"))),
        };
        let labels = c
            .tensor("labels")?
            .data()
            .iter()
            .map(|&v| if v >= 0.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Error::Checkpoint(format!("bad label {v}"))) })
            .collect::<Result<Vec<_>>>()?;
        FeatureBank::new(c.tensor("features")?.clone(), labels, c.parse("classes")?, source)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

/// How images are presented to the frozen encoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractConfig {
    /// Images are resized to this square resolution first; 0 keeps them as is.
    pub resolution: usize,
    pub flow: FlowPolicy,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        ExtractConfig {
            resolution: 0,
            flow: FlowPolicy::default(),
        }
    }
}

fn prepare(img: &Image, res: usize) -> Image {
    if res == 0 || (img.height() == res && img.width() == res) {
        img.clone()
    } else {
        img.resize_bilinear(res, res)
    }
}

/// Final-layer class row and raw patch rows of one image, no queries.
fn encode_one(net: &Network, params: &Params, img: &Image, cfg: &ExtractConfig) -> Result<(Vec<f64>, Tensor)> {
    let img = prepare(img, cfg.resolution);
    let p = net.encoder.cfg.patch;
    let mut g = Graph::new();
    let b = params.bind_frozen(&mut g);
    let out = net.encoder.forward(
        &mut g,
        &b,
        &patchify(&img, p)?,
        (img.height() / p, img.width() / p),
        None,
        cfg.flow,
        EncodeOptions::default(),
    )?;
    Ok((g.value(out.cls).data().to_vec(), g.value(out.raw).clone()))
}

/// One feature row per image from the frozen encoder, in input order.
/// `params` are only read.
pub fn extract_features(
    net: &Network,
    params: &Params,
    images: &[Image],
    labels: &[usize],
    classes: usize,
    source: FeatureSource,
    cfg: &ExtractConfig,
) -> Result<FeatureBank> {
    if images.len() != labels.len() {
        return Err(Error::shape("extract_features", format!("{} images, {} labels", images.len(), labels.len())));
    }
    let rows: Vec<Vec<f64>> = with_pool(|| {
        images
            .par_iter()
            .map(|img| {
                let (cls, raw) = encode_one(net, params, img, cfg)?;
                Ok(match source {
                    FeatureSource::Cls => cls,
                    FeatureSource::Patches => {
                        let n = raw.rows() as f64;
                        (0..raw.cols()).map(|j| (0..raw.rows()).map(|i| raw.at(i, j)).sum::<f64>() / n).collect()
                    }
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let d = rows.first().map_or(net.encoder.cfg.dim, Vec::len);
    let features = Tensor::new(vec![rows.len(), d], rows.concat())?;
    FeatureBank::new(features, labels.to_vec(), classes, source)
}

/// Raw patch rows of every image, stacked image by image, plus the grid.
pub fn patch_features(net: &Network, params: &Params, images: &[Image], cfg: &ExtractConfig) -> Result<(Vec<Tensor>, (usize, usize))> {
    let raws: Vec<Tensor> = with_pool(|| {
        images
            .par_iter()
            .map(|img| encode_one(net, params, img, cfg).map(|(_, raw)| raw))
            .collect::<Result<Vec<_>>>()
    })?;
    let p = net.encoder.cfg.patch;
    let grid = match images.first() {
        Some(img) => {
            let img = prepare(img, cfg.resolution);
            (img.height() / p, img.width() / p)
        }
        None => (0, 0),
    };
    Ok((raws, grid))
}

pub(crate) fn digest_f64s(values: impl IntoIterator<Item = f64>) -> u64 {
    let mut h = Fnv::new();
    for v in values {
        h.write(&v.to_bits().to_le_bytes());
    }
    h.finish()
}

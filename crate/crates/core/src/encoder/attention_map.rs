use std::fmt::Write as _;
use std::path::Path;

use super::vit::{EncoderOutput, RetainedAttention};
use crate::error::{Error, Result};
use crate::numerics::Graph;
use crate::patchify::Image;

/// Which output row to read attention from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSelector {
    Cls,
    Raw(usize),
    Query(usize),
}

impl std::str::FromStr for TokenSelector {
    type Err = Error;

    /// `cls`, `raw:I` or `query:I`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid("token", format!("{s:?} is not cls, raw:I or query:I"));
        if s == "cls" {
            return Ok(TokenSelector::Cls);
        }
        let (kind, idx) = s.split_once(':').ok_or_else(bad)?;
        let i: usize = idx.parse().map_err(|_| bad())?;
        match kind {
            "raw" => Ok(TokenSelector::Raw(i)),
            "query" => Ok(TokenSelector::Query(i)),
            _ => Err(bad()),
        }
    }
}

/// Head-averaged attention of one token over the raw-patch grid. Weights
/// sum to 1 over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub grid: (usize, usize),
    pub weights: Vec<f64>,
}

impl AttentionMap {
    /// Scales weights into `[0, 1]` by the maximum.
    pub fn unit_range(&self) -> Vec<f64> {
        let max = self.weights.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            self.weights.iter().map(|w| w / max).collect()
        } else {
            self.weights.clone()
        }
    }

    /// One grid row per line, space separated.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in 0..self.grid.0 {
            let row = &self.weights[r * self.grid.1..(r + 1) * self.grid.1];
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Grayscale image, upsampled by `scale` per grid cell.
    pub fn to_image(&self, scale: usize) -> Image {
        let scale = scale.max(1);
        let unit = self.unit_range();
        let (h, w) = (self.grid.0 * scale, self.grid.1 * scale);
        let mut img = Image::filled(1, h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                img.set(0, y, x, unit[(y / scale) * self.grid.1 + x / scale]);
            }
        }
        img
    }

    pub fn write(&self, text: &Path, image: Option<(&Path, usize)>) -> Result<()> {
        std::fs::write(text, self.to_text()).map_err(|e| Error::io(text, e))?;
        if let Some((path, scale)) = image {
            self.to_image(scale).write_pnm(path)?;
        }
        Ok(())
    }

    /// Fraction of the top `fraction` of cells that fall inside `mask`
    /// (per-cell booleans), as intersection over union with the mask.
    pub fn top_iou(&self, mask: &[bool], fraction: f64) -> f64 {
        let n = self.weights.len();
        let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| self.weights[b].total_cmp(&self.weights[a]).then(a.cmp(&b)));
        let mut top = vec![false; n];
        for &i in &order[..k] {
            top[i] = true;
        }
        let inter = (0..n).filter(|&i| top[i] && mask[i]).count();
        let union = (0..n).filter(|&i| top[i] || mask[i]).count();
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Head-averaged full attention row of `token` over its keys, before any
/// columns are dropped, plus the key-column index of raw patch 0.
fn full_row(g: &Graph, out: &EncoderOutput, token: TokenSelector) -> Result<(Vec<f64>, usize)> {
    let retained = out
        .attention
        .ok_or_else(|| Error::invalid("attention_map", "attention was not retained for this forward pass"))?;
    let n_ctx = out.n_raw + 1;
    let (node, row, raw_start) = match (retained, token) {
        (RetainedAttention::Split { ctx, .. }, TokenSelector::Cls) => (ctx, 0, 1),
        (RetainedAttention::Split { ctx, .. }, TokenSelector::Raw(i)) => (ctx, 1 + i, 1),
        (RetainedAttention::Split { query, query_sees_cls, .. }, TokenSelector::Query(i)) => {
            let q = query.ok_or_else(|| Error::invalid("attention_map", "no query tokens in this forward pass"))?;
            (q, i, usize::from(query_sees_cls))
        }
        (RetainedAttention::Joint(a), TokenSelector::Cls) => (a, 0, 1),
        (RetainedAttention::Joint(a), TokenSelector::Raw(i)) => (a, 1 + i, 1),
        (RetainedAttention::Joint(a), TokenSelector::Query(i)) => (a, n_ctx + i, 1),
    };
    let limit = match token {
        TokenSelector::Cls => 1,
        TokenSelector::Raw(_) => out.n_raw,
        TokenSelector::Query(_) => out.n_query,
    };
    let index = match token {
        TokenSelector::Cls => 0,
        TokenSelector::Raw(i) | TokenSelector::Query(i) => i,
    };
    if index >= limit {
        return Err(Error::invalid("attention_map", format!("{token:?} out of range")));
    }
    let (heads, probs) = g
        .attention_probs(node)
        .ok_or_else(|| Error::invalid("attention_map", "retained node is not an attention node"))?;
    let rows = g.value(node).rows();
    let cols = probs.len() / (heads * rows);
    let mut mean = vec![0.0; cols];
    for h in 0..heads {
        let p = &probs[(h * rows + row) * cols..(h * rows + row + 1) * cols];
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v / heads as f64;
        }
    }
    Ok((mean, raw_start))
}

/// Mean over heads of the last block's attention row for `token`,
/// restricted to the raw-patch columns and renormalised over the grid.
pub fn attention_map(g: &Graph, out: &EncoderOutput, token: TokenSelector) -> Result<AttentionMap> {
    let (row, start) = full_row(g, out, token)?;
    let raw = &row[start..start + out.n_raw];
    let total: f64 = raw.iter().sum();
    let weights = if total > 0.0 {
        raw.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / out.n_raw as f64; out.n_raw]
    };
    Ok(AttentionMap {
        grid: out.grid,
        weights,
    })
}

/// The head-averaged row before the class (and any query) columns are
/// dropped. Sums to 1.
pub fn attention_row(g: &Graph, out: &EncoderOutput, token: TokenSelector) -> Result<Vec<f64>> {
    full_row(g, out, token).map(|(r, _)| r)
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated; node ids are
//! handed out in evaluation order, so the tape is topologically sorted by
//! construction and [`Graph::backward`] is a single reverse sweep. Leaves are
//! either parameters (tracked) or constants (untracked). A node is tracked
//! iff at least one of its inputs is, and untracked nodes never receive a
//! gradient slot: stop-gradient is simply "bind it as a constant".

use std::collections::HashSet;

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Variance floor used by [`Graph::layernorm`].
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Floor on the norm in the row/column normalisation ops.
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    GradScale(Var, f64),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    LayerNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        temperature: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SoftCrossEntropy {
        logits: Var,
        target: Vec<f64>,
        temperature: f64,
        probs: Vec<f64>,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    NormalizeCols {
        x: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::GradScale(..) => "grad_scale",
            Op::SliceRows(..) => "slice_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::LayerNorm { .. } => "layernorm",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax_rows",
            Op::Attention { .. } => "attention",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::NormalizeCols { .. } => "normalize_cols",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::GradScale(x, _)
            | Op::SliceRows(x, _)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::Softmax { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::NormalizeCols { x, .. } => vec![*x],
            Op::SoftCrossEntropy { logits, .. } => vec![*logits],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// One record of the tape as exposed to callers: op kind, inputs, output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients from one backward sweep. Only tracked nodes have entries.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable row softmax of `x / temperature`, written into `out`.
pub(crate) fn softmax_into(x: &[f64], temperature: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / temperature).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let tracked = op.inputs().iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf with no backward edge.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn records(&self) -> impl Iterator<Item = NodeRecord> + '_ {
        self.nodes.iter().enumerate().map(|(i, n)| NodeRecord {
            kind: n.op.kind(),
            inputs: n.op.inputs(),
            output: Var(i),
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.matmul(bv)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(op_name, av, bv)?;
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(
        &mut self,
        op_name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (xv, rv) = (self.value(x), self.value(row));
        if rv.len() != xv.cols() || rv.rows() != 1 {
            return Err(Error::shape(
                op_name,
                format!("{:?} with row {:?}", xv.shape(), rv.shape()),
            ));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, rv.data()[i % c]))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, op))
    }

    /// `x + b` with the row vector `b` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        self.row_broadcast("add_row", x, b, |v, r| v + r, Op::AddRow(x, b))
    }

    /// `x ⊙ g` with the row vector `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        self.row_broadcast("mul_row", x, g, |v, r| v * r, Op::MulRow(x, g))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let out = self.value(x).map(|v| v * alpha);
        self.push(out, Op::Scale(x, alpha))
    }

    /// Identity in the forward pass; multiplies the incoming gradient by
    /// `factor` in the backward pass.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).clone();
        self.push(out, Op::GradScale(x, factor))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.rows() {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of {:?}", xv.shape()),
            ));
        }
        let out = xv.slice_rows(start, end);
        Ok(self.push(out, Op::SliceRows(x, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    /// Normalises the last axis to zero mean and unit variance. Affine
    /// scale/shift, when given, are row vectors applied afterwards.
    pub fn layernorm(&mut self, x: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::invalid("layernorm", format!("last axis {d} < 2")));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for (o, &v) in xhat[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), xhat.clone())?;
        let y = self.push(out, Op::LayerNorm { x, xhat, inv_std });
        match affine {
            Some((g, b)) => {
                let scaled = self.mul_row(y, g)?;
                self.add_row(scaled, b)
            }
            None => Ok(y),
        }
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Row-wise softmax of `x / temperature`.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "softmax_rows",
                format!("temperature {temperature} must be positive"),
            ));
        }
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Tensor::zeros(xv.shape());
        for r in 0..xv.rows() {
            softmax_into(xv.row(r), temperature, &mut out.data_mut()[r * c..(r + 1) * c]);
        }
        Ok(self.push(out, Op::Softmax { x, temperature }))
    }

    /// Multi-head scaled dot-product attention of query rows `q` over the
    /// key/value rows `k`, `v`. Heads split the feature axis evenly; scores
    /// are scaled by `1/sqrt(d_head)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("{heads} heads do not divide width {d}"),
            ));
        }
        if kv.cols() != d || vv.cols() != d || kv.rows() != vv.rows() || kv.rows() == 0 {
            return Err(Error::shape(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (m, n) = (qv.rows(), kv.rows());
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut probs = vec![0.0; heads * m * n];
        let mut out = vec![0.0; m * d];
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..m {
                let qi = &qv.row(i)[cols.clone()];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = kernels::dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                let p = &mut probs[(h * m + i) * n..(h * m + i + 1) * n];
                softmax_into(&scores, 1.0, p);
                let o = &mut out[i * d + h * dk..i * d + (h + 1) * dk];
                for (j, &pj) in p.iter().enumerate() {
                    kernels::axpy(pj, &vv.row(j)[cols.clone()], o);
                }
            }
        }
        let out = Tensor::new(vec![m, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Attention probabilities saved by an [`Graph::attention`] node, laid
    /// out `heads × query_rows × key_rows`.
    pub fn attention_probs(&self, v: Var) -> Option<(usize, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { heads, probs, .. } => Some((*heads, probs)),
            _ => None,
        }
    }

    /// `Σ_rows −Σ_k target[k] · log softmax(logits / temperature)[k]`.
    ///
    /// The target is a constant: no gradient ever flows into it.
    pub fn soft_cross_entropy(
        &mut self,
        logits: Var,
        target: &Tensor,
        temperature: f64,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "soft_cross_entropy",
                format!("temperature {temperature} must be positive"),
            ));
        }
        let lv = self.value(logits);
        same_shape("soft_cross_entropy", lv, target)?;
        let c = lv.cols();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for r in 0..lv.rows() {
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row
                .iter()
                .map(|&v| ((v - max) / temperature).exp())
                .sum::<f64>()
                .ln();
            for (k, &v) in row.iter().enumerate() {
                let logp = (v - max) / temperature - lse;
                probs[r * c + k] = logp.exp();
                let t = target.row(r)[k];
                if t != 0.0 {
                    total -= t * logp;
                }
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::SoftCrossEntropy {
                logits,
                target: target.data().to_vec(),
                temperature,
                probs,
            },
        ))
    }

    /// L2-normalises every row.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = xv.clone();
        let mut norms = vec![0.0; xv.rows()];
        for r in 0..xv.rows() {
            let n = kernels::dot(xv.row(r), xv.row(r)).sqrt().max(NORMALIZE_EPS);
            norms[r] = n;
            for o in &mut out.data_mut()[r * c..(r + 1) * c] {
                *o /= n;
            }
        }
        self.push(out, Op::NormalizeRows { x, norms })
    }

    /// L2-normalises every column (weight normalisation with unit gain).
    pub fn normalize_cols(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut norms = vec![0.0; c];
        for i in 0..r {
            for (j, n) in norms.iter_mut().enumerate() {
                let v = xv.data()[i * c + j];
                *n += v * v;
            }
        }
        for n in &mut norms {
            *n = n.sqrt().max(NORMALIZE_EPS);
        }
        let mut out = xv.clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o /= norms[i % c];
        }
        self.push(out, Op::NormalizeCols { x, norms })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.sum() / xv.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].tracked {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                self.accumulate(grads, *a, |da| {
                    kernels::matmul_nt(g, bv.data(), da, m, n, k);
                });
                self.accumulate(grads, *b, |db| {
                    kernels::matmul_tn(av.data(), g, db, m, k, n);
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |da| kernels::axpy(1.0, g, da));
                self.accumulate(grads, *b, |db| kernels::axpy(1.0, g, db));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |da| kernels::axpy(1.0, g, da));
                self.accumulate(grads, *b, |db| kernels::axpy(-1.0, g, db));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv.data()) {
                        *d += gi * bi;
                    }
                });
                self.accumulate(grads, *b, |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av.data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = self.value(*b).len();
                self.accumulate(grads, *x, |dx| kernels::axpy(1.0, g, dx));
                self.accumulate(grads, *b, |db| {
                    for row in g.chunks(c) {
                        kernels::axpy(1.0, row, db);
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (xv, rv) = (self.value(*x), self.value(*r));
                let c = rv.len();
                self.accumulate(grads, *x, |dx| {
                    for (i, (d, &gi)) in dx.iter_mut().zip(g).enumerate() {
                        *d += gi * rv.data()[i % c];
                    }
                });
                self.accumulate(grads, *r, |dr| {
                    for (i, (&gi, &xi)) in g.iter().zip(xv.data()).enumerate() {
                        dr[i % c] += gi * xi;
                    }
                });
            }
            Op::Scale(x, alpha) => {
                self.accumulate(grads, *x, |dx| kernels::axpy(*alpha, g, dx));
            }
            Op::GradScale(x, factor) => {
                self.accumulate(grads, *x, |dx| kernels::axpy(*factor, g, dx));
            }
            Op::SliceRows(x, start) => {
                let c = self.value(*x).cols();
                self.accumulate(grads, *x, |dx| {
                    kernels::axpy(1.0, g, &mut dx[start * c..start * c + g.len()]);
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |dp| {
                        kernels::axpy(1.0, &g[offset..offset + n], dp);
                    });
                    offset += n;
                }
            }
            Op::LayerNorm { x, xhat, inv_std } => {
                let d = self.value(*x).cols();
                self.accumulate(grads, *x, |dx| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let sum_g: f64 = gr.iter().sum();
                        let sum_gx = kernels::dot(gr, xr);
                        let n = d as f64;
                        for j in 0..d {
                            dx[r * d + j] += is / n * (n * gr[j] - sum_g - xr[j] * sum_gx);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for ((d, &gi), &xi) in dx.iter_mut().zip(g).zip(xv.data()) {
                        *d += gi * gelu_grad(xi);
                    }
                });
            }
            Op::Softmax { x, temperature } => {
                let y = &node.value;
                let c = y.cols();
                self.accumulate(grads, *x, |dx| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let s = kernels::dot(yr, gr);
                        for j in 0..c {
                            dx[r * c + j] += yr[j] * (gr[j] - s) / temperature;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::SoftCrossEntropy {
                logits,
                target,
                temperature,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let g0 = g[0];
                self.accumulate(grads, *logits, |dl| {
                    for (r, (tr, pr)) in target.chunks(c).zip(probs.chunks(c)).enumerate() {
                        let mass: f64 = tr.iter().sum();
                        for j in 0..c {
                            dl[r * c + j] += g0 * (pr[j] * mass - tr[j]) / temperature;
                        }
                    }
                });
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let c = y.cols();
                let xv = self.value(*x);
                self.accumulate(grads, *x, |dx| {
                    for (r, &n) in norms.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let raw = kernels::dot(xv.row(r), xv.row(r)).sqrt();
                        if raw > NORMALIZE_EPS {
                            let yr = y.row(r);
                            let s = kernels::dot(yr, gr);
                            for j in 0..c {
                                dx[r * c + j] += (gr[j] - yr[j] * s) / n;
                            }
                        } else {
                            kernels::axpy(1.0 / n, gr, &mut dx[r * c..(r + 1) * c]);
                        }
                    }
                });
            }
            Op::NormalizeCols { x, norms } => {
                let y = &node.value;
                let (rows, c) = (y.rows(), y.cols());
                let xv = self.value(*x);
                let mut dots = vec![0.0; c];
                let mut raw = vec![0.0; c];
                for i in 0..rows {
                    for j in 0..c {
                        dots[j] += y.data()[i * c + j] * g[i * c + j];
                        raw[j] += xv.data()[i * c + j] * xv.data()[i * c + j];
                    }
                }
                self.accumulate(grads, *x, |dx| {
                    for i in 0..rows {
                        for j in 0..c {
                            let idx = i * c + j;
                            if raw[j].sqrt() > NORMALIZE_EPS {
                                dx[idx] += (g[idx] - y.data()[idx] * dots[j]) / norms[j];
                            } else {
                                dx[idx] += g[idx] / norms[j];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                let g0 = g[0] / n;
                self.accumulate(grads, *x, |dx| dx.iter_mut().for_each(|d| *d += g0));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (m, n) = (qv.rows(), kv.rows());
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = vec![0.0; m * d];
        let mut dkey = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let cols = h * dk..(h + 1) * dk;
            for i in 0..m {
                let p = &probs[(h * m + i) * n..(h * m + i + 1) * n];
                let go = &g[i * d + h * dk..i * d + (h + 1) * dk];
                for j in 0..n {
                    dp[j] = kernels::dot(go, &vv.row(j)[cols.clone()]);
                    kernels::axpy(p[j], go, &mut dv[j * d + h * dk..j * d + (h + 1) * dk]);
                }
                let s = kernels::dot(p, &dp);
                let qi = &qv.row(i)[cols.clone()];
                for j in 0..n {
                    let ds = p[j] * (dp[j] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    kernels::axpy(
                        ds,
                        &kv.row(j)[cols.clone()],
                        &mut dq[i * d + h * dk..i * d + (h + 1) * dk],
                    );
                    kernels::axpy(ds, qi, &mut dkey[j * d + h * dk..j * d + (h + 1) * dk]);
                }
            }
        }
        self.accumulate(grads, q, |t| kernels::axpy(1.0, &dq, t));
        self.accumulate(grads, k, |t| kernels::axpy(1.0, &dkey, t));
        self.accumulate(grads, v, |t| kernels::axpy(1.0, &dv, t));
    }

    /// Whether row `out_row` of `output` is reachable from row `in_row` of
    /// `input` along recorded edges, following each op's row structure
    /// (row-local ops keep rows apart; matmul right operands, attention
    /// keys/values and reductions depend on every row).
    pub fn row_influences(&self, input: Var, in_row: usize, output: Var, out_row: usize) -> bool {
        #[derive(Clone, Copy, PartialEq, Eq, Hash)]
        enum Sel {
            Row(usize),
            All,
        }
        let mut stack = vec![(output, Sel::Row(out_row))];
        let mut seen = HashSet::new();
        while let Some((v, sel)) = stack.pop() {
            if v.0 < input.0 || !seen.insert((v, sel)) {
                continue;
            }
            if v == input {
                match sel {
                    Sel::All => return true,
                    Sel::Row(r) if r == in_row => return true,
                    Sel::Row(_) => continue,
                }
            }
            let rows_of = |x: Var| self.value(x).rows();
            match &self.nodes[v.0].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    stack.push((*a, sel));
                    stack.push((*b, Sel::All));
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    stack.push((*a, sel));
                    stack.push((*b, sel));
                }
                Op::AddRow(x, r) | Op::MulRow(x, r) => {
                    stack.push((*x, sel));
                    stack.push((*r, Sel::All));
                }
                Op::Scale(x, _)
                | Op::GradScale(x, _)
                | Op::Gelu(x)
                | Op::LayerNorm { x, .. }
                | Op::Softmax { x, .. }
                | Op::NormalizeRows { x, .. } => stack.push((*x, sel)),
                Op::NormalizeCols { x, .. } | Op::Sum(x) | Op::Mean(x) => {
                    stack.push((*x, Sel::All))
                }
                Op::SoftCrossEntropy { logits, .. } => stack.push((*logits, Sel::All)),
                Op::SliceRows(x, start) => match sel {
                    Sel::Row(r) => stack.push((*x, Sel::Row(start + r))),
                    Sel::All => {
                        for r in 0..rows_of(v) {
                            stack.push((*x, Sel::Row(start + r)));
                        }
                    }
                },
                Op::ConcatRows(parts) => match sel {
                    Sel::Row(mut r) => {
                        for p in parts {
                            let n = rows_of(*p);
                            if r < n {
                                stack.push((*p, Sel::Row(r)));
                                break;
                            }
                            r -= n;
                        }
                    }
                    Sel::All => parts.iter().for_each(|p| stack.push((*p, Sel::All))),
                },
                Op::Attention { q, k, v: vals, .. } => {
                    stack.push((*q, sel));
                    stack.push((*k, Sel::All));
                    stack.push((*vals, Sel::All));
                }
            }
        }
        false
    }
}

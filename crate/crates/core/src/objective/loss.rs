use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_into, Graph, Tensor, Var};

/// `softmax((logits − c) / τ_t)` row by row.
pub fn teacher_distribution(logits: &Tensor, center: &[f64], tau_t: f64) -> Result<Tensor> {
    if !(tau_t > 0.0) {
        return Err(Error::invalid("teacher_distribution", format!("temperature {tau_t} must be positive")));
    }
    if logits.cols() != center.len() {
        return Err(Error::shape(
            "teacher_distribution",
            format!("logits {:?} against center of length {}", logits.shape(), center.len()),
        ));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite {
            location: "teacher_distribution: logits".into(),
        });
    }
    let k = center.len();
    let mut out = Tensor::zeros(logits.shape());
    let mut shifted = vec![0.0; k];
    for r in 0..logits.rows() {
        for (s, (l, c)) in shifted.iter_mut().zip(logits.row(r).iter().zip(center)) {
            *s = l - c;
        }
        softmax_into(&shifted, tau_t, out.row_mut(r));
    }
    Ok(out)
}

/// `Σ_rows −Σ_k p_teacher[k] · log softmax(student / τ_s)[k]`. The teacher
/// side is a constant.
pub fn h_cross_entropy(g: &mut Graph, teacher_p: &Tensor, student_logits: Var, tau_s: f64) -> Result<Var> {
    g.soft_cross_entropy(student_logits, teacher_p, tau_s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the query-token term.
    pub lambda: f64,
    pub tau_s: f64,
    /// Average the query term over both teacher/student directions.
    pub symmetric: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.5,
            tau_s: 0.1,
            symmetric: true,
        }
    }
}

/// Student logits of one view. Only global views carry query rows.
#[derive(Debug, Clone, Copy)]
pub struct StudentView {
    pub cls: Var,
    pub query: Option<Var>,
}

/// Teacher targets (probabilities) of one global view.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherView {
    pub cls: Tensor,
    pub query: Option<Tensor>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub global: Var,
    pub local: Option<Var>,
}

/// Global term: every teacher global view against every student view other
/// than itself, averaged over pairs. Student views are ordered globals
/// first, so student view `i` and teacher view `i` see the same crop.
///
/// Local term: `(λ/Q)·Σ_i` cross-view loss of query row `i`, student on one
/// global view against the teacher on the other, averaged over both
/// directions when symmetric.
pub fn adclr_loss(g: &mut Graph, student: &[StudentView], teacher: &[TeacherView], cfg: &LossConfig) -> Result<LossParts> {
    if !(cfg.lambda >= 0.0) {
        return Err(Error::Config(format!("lambda {} must be non-negative", cfg.lambda)));
    }
    if teacher.is_empty() || student.len() < teacher.len() {
        return Err(Error::invalid(
            "adclr_loss",
            format!("{} student views for {} teacher views", student.len(), teacher.len()),
        ));
    }
    let mut terms = Vec::new();
    for (ti, t) in teacher.iter().enumerate() {
        for (si, s) in student.iter().enumerate() {
            if si != ti {
                terms.push(h_cross_entropy(g, &t.cls, s.cls, cfg.tau_s)?);
            }
        }
    }
    if terms.is_empty() {
        return Err(Error::invalid("adclr_loss", "need at least two views to form a pair"));
    }
    let global = mean_of(g, &terms)?;

    let q = teacher[0].query.as_ref().map_or(0, Tensor::rows);
    if cfg.lambda == 0.0 || q == 0 || teacher.len() < 2 {
        return Ok(LossParts {
            total: global,
            global,
            local: None,
        });
    }
    let mut pairs = Vec::new();
    for (ti, t) in teacher.iter().enumerate() {
        for (si, s) in student[..teacher.len()].iter().enumerate() {
            if si == ti || (!cfg.symmetric && !(si == 0 && ti == 1)) {
                continue;
            }
            let (tq, sq) = match (&t.query, s.query) {
                (Some(tq), Some(sq)) if tq.rows() == q && g.value(sq).rows() == q => (tq, sq),
                _ => return Err(Error::shape("adclr_loss", "global views carry different query counts")),
            };
            pairs.push(h_cross_entropy(g, tq, sq, cfg.tau_s)?);
        }
    }
    let mean = mean_of(g, &pairs)?;
    let local = g.scale(mean, cfg.lambda / q as f64);
    let total = g.add(global, local)?;
    Ok(LossParts {
        total,
        global,
        local: Some(local),
    })
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(g.scale(acc, 1.0 / terms.len() as f64))
}

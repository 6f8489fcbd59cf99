use crate::error::{Error, Result};
use crate::numerics::{Params, Tensor};

/// `θ′ ← m·θ′ + (1−m)·θ` over every tensor.
pub fn ema_update(teacher: &mut Params, student: &Params, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid("ema_update", format!("momentum {m} outside [0, 1]")));
    }
    teacher.check_layout(student, "ema_update")?;
    for id in student.ids() {
        let s = student.get(id).data();
        for (t, &v) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = m * *t + (1.0 - m) * v;
        }
    }
    Ok(())
}

/// `c ← ρ·c + (1−ρ)·mean` of all rows across `batch`. An empty batch
/// leaves `c` unchanged.
pub fn center_update(center: &mut [f64], batch: &[&Tensor], rho: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid("center_update", format!("momentum {rho} outside [0, 1]")));
    }
    let k = center.len();
    let mut sum = vec![0.0; k];
    let mut rows = 0usize;
    for t in batch {
        if t.rows() == 0 {
            continue;
        }
        if t.cols() != k {
            return Err(Error::shape("center_update", format!("{:?} against center {k}", t.shape())));
        }
        for r in 0..t.rows() {
            for (s, v) in sum.iter_mut().zip(t.row(r)) {
                *s += v;
            }
        }
        rows += t.rows();
    }
    if rows == 0 {
        return Ok(());
    }
    for (c, s) in center.iter_mut().zip(sum) {
        *c = rho * *c + (1.0 - rho) * s / rows as f64;
    }
    Ok(())
}

/// Student and teacher parameters with the teacher-side running state.
/// Class-token and query-token outputs keep separate centers.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillPair {
    pub student: Params,
    pub teacher: Params,
    pub center: Vec<f64>,
    pub query_center: Vec<f64>,
    pub center_momentum: f64,
}

impl DistillPair {
    /// Teacher starts as an exact copy of the student; center at zero.
    pub fn new(student: Params, prototypes: usize) -> Self {
        DistillPair {
            teacher: student.clone(),
            student,
            center: vec![0.0; prototypes],
            query_center: vec![0.0; prototypes],
            center_momentum: 0.9,
        }
    }

    pub fn ema(&mut self, m: f64) -> Result<()> {
        ema_update(&mut self.teacher, &self.student, m)
    }

    pub fn update_center(&mut self, batch: &[&Tensor]) -> Result<()> {
        center_update(&mut self.center, batch, self.center_momentum)
    }

    /// An empty query batch leaves the query center unchanged.
    pub fn update_query_center(&mut self, batch: &[&Tensor]) -> Result<()> {
        center_update(&mut self.query_center, batch, self.center_momentum)
    }
}

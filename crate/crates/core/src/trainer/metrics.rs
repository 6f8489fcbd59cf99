use std::fmt::Write as _;

pub const METRICS_HEADER: &str = "step,epoch,lr,wd,tau_t,m,global_loss,local_loss,total_loss";

/// Scalars recorded for one optimisation step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub wd: f64,
    pub tau_t: f64,
    pub m: f64,
    pub global_loss: f64,
    pub local_loss: f64,
    pub total_loss: f64,
}

impl StepMetrics {
    /// One CSV line. Floats use the shortest round-trip representation, so
    /// equal values always print identically.
    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.step, self.epoch);
        for v in [self.lr, self.wd, self.tau_t, self.m, self.global_loss, self.local_loss, self.total_loss] {
            let _ = write!(s, ",{v:?}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_has_header_arity_and_roundtrips() {
        let m = StepMetrics {
            step: 3,
            epoch: 1,
            lr: 1.0 / 3.0,
            wd: 0.04,
            tau_t: 0.07,
            m: 0.996,
            global_loss: 5.5,
            local_loss: 0.0,
            total_loss: 5.5,
        };
        let row = m.csv_row();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), METRICS_HEADER.split(',').count());
        assert_eq!(fields[2].parse::<f64>().unwrap(), 1.0 / 3.0);
    }
}

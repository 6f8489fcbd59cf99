//! Central-difference gradient checking against [`Graph::backward`].

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Upper bound on checked coordinates per parameter tensor; all are
    /// checked when the tensor is smaller.
    pub max_coords_per_param: usize,
    pub seed: u64,
    /// Smallest denominator of the relative error. Central differences
    /// carry absolute noise near `ε·|f|/h`, so coordinates whose gradient is
    /// below this are judged on absolute error in units of the floor.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords_per_param: usize::MAX,
            seed: 0,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, flat coordinate) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `f` against central differences.
///
/// `f` receives a fresh graph and one tracked leaf per entry of `params`, and
/// must return a single-element node. The error for each coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<F>(f: F, params: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let f0 = g.value(out).data()[0];
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            location: "grad_check: objective at the unperturbed point".into(),
        });
    }
    let grads = g.backward(out)?;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (pi, (param, var)) in params.iter().zip(&vars).enumerate() {
        let analytic_all = grads.get(*var);
        let coords: Vec<usize> = if param.len() <= opts.max_coords_per_param {
            (0..param.len()).collect()
        } else {
            let mut c = sample(&mut rng, param.len(), opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for idx in coords {
            let original = param.data()[idx];
            work[pi].data_mut()[idx] = original + opts.step;
            let plus = eval(&work)?;
            work[pi].data_mut()[idx] = original - opts.step;
            let minus = eval(&work)?;
            work[pi].data_mut()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("grad_check: parameter {pi}, coordinate {idx}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.step);
            let analytic = analytic_all.map_or(0.0, |g| g[idx]);
            if !analytic.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("grad_check: analytic gradient, parameter {pi}, coordinate {idx}"),
                });
            }
            let denom = analytic.abs().max(numeric.abs()).max(opts.floor);
            let err = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, idx);
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn sum_of_squares_is_near_exact() {
        let p = Tensor::randn(&[3, 4], 1.0, &mut rng());
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-8, "{r:?}");
        assert_eq!(r.checked, 12);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let p = Tensor::randn(&[2, 3], 1.0, &mut rng());
        let r = grad_check(
            |g, v| {
                let bad = g.grad_scale(v[0], 1.1);
                let sq = g.mul(bad, bad)?;
                Ok(g.sum(sq))
            },
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error > 1e-2, "{r:?}");
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let p = Tensor::full(&[1, 2], 1.0);
        let err = grad_check(
            |g, v| {
                let big = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(big))
            },
            &[p],
            &GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}

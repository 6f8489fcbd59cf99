use crate::error::{Error, Result};
use crate::numerics::Tensor;

const SWEEPS: usize = 60;

/// Singular values of `m` by one-sided Jacobi rotations, descending.
pub fn singular_values(m: &Tensor) -> Vec<f64> {
    let (rows, cols) = (m.rows(), m.cols());
    // Work on the wider side's transpose so columns are the short axis.
    let a = if cols > rows { m.transpose() } else { m.clone() };
    let (r, c) = (a.rows(), a.cols());
    let mut cols_data: Vec<Vec<f64>> = (0..c).map(|j| (0..r).map(|i| a.at(i, j)).collect()).collect();
    // Pairs whose coupling is negligible against the whole matrix are left
    // alone; otherwise rank-deficient inputs keep rotating round-off.
    let floor = 1e-30 * a.data().iter().map(|v| v * v).sum::<f64>();
    for _ in 0..SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in p + 1..c {
                let (alpha, beta, gamma) = {
                    let (x, y) = (&cols_data[p], &cols_data[q]);
                    let alpha: f64 = x.iter().map(|v| v * v).sum();
                    let beta: f64 = y.iter().map(|v| v * v).sum();
                    let gamma: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                    (alpha, beta, gamma)
                };
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma.abs() <= floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (lo, hi) = cols_data.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xv, yv) = (*x, *y);
                    *x = cs * xv - sn * yv;
                    *y = sn * xv + cs * yv;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = cols_data
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `exp(−Σ p_k log p_k)` with `p_k = σ_k / Σσ`.
pub fn effective_rank(m: &Tensor) -> Result<f64> {
    if !m.is_finite() {
        return Err(Error::NonFinite {
            location: "effective_rank: matrix".into(),
        });
    }
    let s = singular_values(m);
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::invalid("effective_rank", "matrix is zero"));
    }
    let entropy: f64 = s
        .iter()
        .map(|v| v / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    Ok(entropy.exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_one_is_one() {
        let u = [1.0, -2.0, 0.5];
        let v = [3.0, 1.0];
        let data = u.iter().flat_map(|a| v.iter().map(move |b| a * b)).collect();
        let m = Tensor::new(vec![3, 2], data).unwrap();
        assert!((effective_rank(&m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_is_full() {
        for k in 1..6 {
            assert!((effective_rank(&Tensor::eye(k)).unwrap() - k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_rejected() {
        assert!(effective_rank(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn wide_and_tall_agree() {
        let m = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, -1.0, 2.0]]);
        let a = singular_values(&m);
        let b = singular_values(&m.transpose());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

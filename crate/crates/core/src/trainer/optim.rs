use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with decoupled weight decay. Decay applies only to tensors flagged
/// for it (weights, not biases or norm parameters).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub m: Params,
    pub v: Params,
    pub t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, like: &Params) -> Self {
        AdamW {
            cfg,
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }

    /// One update of `params` from `grads` (one flat vector per tensor).
    pub fn step(&mut self, params: &mut Params, grads: &[Vec<f64>], lr: f64, wd: f64) -> Result<()> {
        params.check_layout(&self.m, "adamw")?;
        if grads.len() != params.len() {
            return Err(Error::shape("adamw", format!("{} gradients for {} tensors", grads.len(), params.len())));
        }
        self.t += 1;
        let AdamWConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (id, g) in params.ids().zip(grads) {
            let decay = params.decays(id);
            let p = params.get_mut(id).data_mut();
            if g.len() != p.len() {
                return Err(Error::shape("adamw", "gradient length differs from tensor"));
            }
            let m = self.m.get_mut(id).data_mut();
            let v = self.v.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                if decay {
                    p[i] -= lr * wd * p[i];
                }
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-6);
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn params() -> Params {
        let mut p = Params::new();
        p.add("w", Tensor::full(&[1, 2], 1.0), true);
        p.add("b", Tensor::full(&[1, 2], 1.0), false);
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[vec![2.0, -3.0], vec![0.5, 0.0]], 0.1, 0.0).unwrap();
        let w = p.get(p.find("w").unwrap()).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - 1.1).abs() < 1e-7);
        assert_eq!(p.get(p.find("b").unwrap()).data()[1], 1.0);
    }

    #[test]
    fn decay_only_on_flagged() {
        let mut p = params();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[vec![0.0; 2], vec![0.0; 2]], 0.1, 0.5).unwrap();
        assert!((p.get(p.find("w").unwrap()).data()[0] - 0.95).abs() < 1e-15);
        assert_eq!(p.get(p.find("b").unwrap()).data()[0], 1.0);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = params();
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &[vec![1.0; 2], vec![1.0; 2]], 0.0, 0.4).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g, vec![vec![3.0], vec![4.0]]);
        clip_global_norm(&mut g, 1.0);
        let n = (g[0][0] * g[0][0] + g[1][0] * g[1][0]).sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, Params, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    /// Output width K.
    pub prototypes: usize,
    pub init_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            hidden: 64,
            bottleneck: 32,
            prototypes: 256,
            init_std: 0.02,
        }
    }
}

/// Three-layer MLP, L2-normalised bottleneck and a weight-normalised
/// prototype layer without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub cfg: HeadConfig,
    pub layers: [(ParamId, ParamId); 3],
    pub prototypes: ParamId,
}

impl ProjectionHead {
    pub fn init<R: Rng + ?Sized>(
        cfg: HeadConfig,
        input: usize,
        params: &mut Params,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.prototypes < 2 || cfg.hidden == 0 || cfg.bottleneck == 0 {
            return Err(Error::Config(format!(
                "head needs at least 2 prototypes and positive widths, got {cfg:?}"
            )));
        }
        let widths = [(input, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, cfg.bottleneck)];
        let mut layer = |n: usize| {
            let (i, o) = widths[n];
            let w = params.add(
                format!("{prefix}.mlp{n}.weight"),
                Tensor::trunc_normal(&[i, o], cfg.init_std, rng),
                true,
            );
            let b = params.add(format!("{prefix}.mlp{n}.bias"), Tensor::zeros(&[1, o]), false);
            (w, b)
        };
        let layers = [layer(0), layer(1), layer(2)];
        let prototypes = params.add(
            format!("{prefix}.prototypes"),
            Tensor::trunc_normal(&[cfg.bottleneck, cfg.prototypes], cfg.init_std, rng),
            true,
        );
        Ok(ProjectionHead {
            cfg,
            layers,
            prototypes,
        })
    }

    pub fn parameter_count(&self, input: usize) -> usize {
        let c = &self.cfg;
        (input + 1) * c.hidden + (c.hidden + 1) * c.hidden + (c.hidden + 1) * c.bottleneck + c.bottleneck * c.prototypes
    }

    /// Maps `rows × d` features to `rows × K` logits.
    pub fn forward(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, (w, bias)) in self.layers.iter().enumerate() {
            h = g.matmul(h, b[*w])?;
            h = g.add_row(h, b[*bias])?;
            if i < 2 {
                h = g.gelu(h);
            }
        }
        let h = g.normalize_rows(h);
        let w = g.normalize_cols(b[self.prototypes]);
        g.matmul(h, w)
    }
}

/// Encoder plus projection head sharing one parameter collection. The same
/// head serves class and query rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub encoder: Encoder,
    pub head: ProjectionHead,
}

impl Network {
    pub fn init<R: Rng + ?Sized>(enc: EncoderConfig, head: HeadConfig, rng: &mut R) -> Result<(Network, Params)> {
        let mut params = Params::new();
        let encoder = Encoder::init(enc, &mut params, "encoder", rng)?;
        let head = ProjectionHead::init(head, enc.dim, &mut params, "head", rng)?;
        Ok((Network { encoder, head }, params))
    }
}

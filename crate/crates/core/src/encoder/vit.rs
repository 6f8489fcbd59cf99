use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Bound, Graph, ParamId, Params, Tensor, Var};
use crate::patchify::{bicubic_grid_matrix, embed, embed_queries};

/// Which tokens may attend to which.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Class and raw tokens attend among themselves; each query token
    /// attends to the context only.
    Unidirectional,
    /// One sequence, every token attends to every token.
    Bidirectional,
}

impl std::str::FromStr for FlowMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unidirectional" | "uni" => Ok(FlowMode::Unidirectional),
            "bidirectional" | "bi" => Ok(FlowMode::Bidirectional),
            _ => Err(Error::Config(format!("unknown flow mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowPolicy {
    pub mode: FlowMode,
    /// Whether query rows see the class token among their keys
    /// (unidirectional mode only). When false they see raw tokens only.
    pub query_sees_cls: bool,
}

impl Default for FlowPolicy {
    fn default() -> Self {
        FlowPolicy {
            mode: FlowMode::Unidirectional,
            query_sees_cls: true,
        }
    }
}

impl FlowPolicy {
    pub fn unidirectional() -> Self {
        FlowPolicy::default()
    }

    pub fn bidirectional() -> Self {
        FlowPolicy {
            mode: FlowMode::Bidirectional,
            ..FlowPolicy::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub channels: usize,
    pub patch: usize,
    /// Resolution the positional embeddings are stored at; other view sizes
    /// are served by bicubic resampling of this grid.
    pub base_res: usize,
    pub init_std: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 32,
            depth: 2,
            heads: 4,
            mlp_hidden: 64,
            channels: 3,
            patch: 8,
            base_res: 64,
            init_std: 0.02,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder dim {} must be at least 2 and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_hidden == 0 || self.channels == 0 {
            return Err(Error::Config("encoder depth, mlp_hidden and channels must be positive".into()));
        }
        if self.patch == 0 || self.base_res % self.patch != 0 {
            return Err(Error::Config(format!(
                "base resolution {} is not a multiple of patch size {}",
                self.base_res, self.patch
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn base_grid(&self) -> (usize, usize) {
        (self.base_res / self.patch, self.base_res / self.patch)
    }

    /// Scalar count of a plain ViT of this shape; the flow policy adds none.
    pub fn parameter_count(&self) -> usize {
        let (d, h, p) = (self.dim, self.mlp_hidden, self.patch_dim());
        let (gh, gw) = self.base_grid();
        let block = 2 * d + 4 * (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
        p * d + gh * gw * d + d + self.depth * block + 2 * d
    }
}

/// Parameter handles of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1: (ParamId, ParamId),
    pub wq: (ParamId, ParamId),
    pub wk: (ParamId, ParamId),
    pub wv: (ParamId, ParamId),
    pub wo: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
    pub heads: usize,
}

impl BlockParams {
    pub fn head_dim(&self, dim: usize) -> usize {
        dim / self.heads
    }
}

/// Vision transformer layout: handles into a [`Params`] collection plus the
/// shape configuration. The same layout serves student and teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub projector: ParamId,
    pub pos: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<BlockParams>,
    pub norm: (ParamId, ParamId),
}

/// Rows of one view's token sequence as graph nodes: `ctx = [cls | raw]`
/// and an optional query block.
#[derive(Debug, Clone, Copy)]
pub struct Tokens {
    pub ctx: Var,
    pub query: Option<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct EncodeOptions {
    pub retain_attention: bool,
}

/// Last-block attention nodes kept for inspection.
#[derive(Debug, Clone, Copy)]
pub enum RetainedAttention {
    /// Context rows over context keys, and query rows over their keys.
    Split {
        ctx: Var,
        query: Option<Var>,
        query_sees_cls: bool,
    },
    /// All rows over all keys.
    Joint(Var),
}

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub cls: Var,
    pub raw: Var,
    pub query: Option<Var>,
    pub n_raw: usize,
    pub n_query: usize,
    pub grid: (usize, usize),
    pub attention: Option<RetainedAttention>,
}

fn linear(g: &mut Graph, x: Var, w: (Var, Var)) -> Result<Var> {
    let y = g.matmul(x, w.0)?;
    g.add_row(y, w.1)
}

impl Encoder {
    /// Registers a freshly initialised encoder under `prefix` in `params`.
    pub fn init<R: Rng + ?Sized>(cfg: EncoderConfig, params: &mut Params, prefix: &str, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (d, hdn, std) = (cfg.dim, cfg.mlp_hidden, cfg.init_std);
        let (gh, gw) = cfg.base_grid();
        let weight = |params: &mut Params, name: String, rows: usize, cols: usize, rng: &mut R| {
            let w = params.add(format!("{name}.weight"), Tensor::trunc_normal(&[rows, cols], std, rng), true);
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[1, cols]), false);
            (w, b)
        };
        let norm = |params: &mut Params, name: String| {
            let g = params.add(format!("{name}.gain"), Tensor::full(&[1, d], 1.0), false);
            let b = params.add(format!("{name}.bias"), Tensor::zeros(&[1, d]), false);
            (g, b)
        };
        let projector = params.add(
            format!("{prefix}.patch_embed"),
            Tensor::trunc_normal(&[cfg.patch_dim(), d], std, rng),
            true,
        );
        let pos = params.add(format!("{prefix}.pos_embed"), Tensor::trunc_normal(&[gh * gw, d], std, rng), false);
        let cls = params.add(format!("{prefix}.cls_token"), Tensor::trunc_normal(&[1, d], std, rng), false);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("{prefix}.block{i}");
            let ln1 = norm(params, format!("{p}.norm1"));
            let wq = weight(params, format!("{p}.attn.q"), d, d, rng);
            let wk = weight(params, format!("{p}.attn.k"), d, d, rng);
            let wv = weight(params, format!("{p}.attn.v"), d, d, rng);
            let wo = weight(params, format!("{p}.attn.proj"), d, d, rng);
            let ln2 = norm(params, format!("{p}.norm2"));
            let fc1 = weight(params, format!("{p}.mlp.fc1"), d, hdn, rng);
            let fc2 = weight(params, format!("{p}.mlp.fc2"), hdn, d, rng);
            blocks.push(BlockParams {
                ln1,
                wq,
                wk,
                wv,
                wo,
                ln2,
                fc1,
                fc2,
                heads: cfg.heads,
            });
        }
        let norm = norm(params, format!("{prefix}.norm"));
        Ok(Encoder {
            cfg,
            projector,
            pos,
            cls,
            blocks,
            norm,
        })
    }

    /// Embeds one view (already patchified, `N × C·P²`) and its query crops
    /// (`Q × C·P²`) into graph tokens. Positional embeddings are resampled to
    /// the view's grid when it differs from the stored one.
    pub fn tokens(
        &self,
        g: &mut Graph,
        b: &Bound,
        patches: &Tensor,
        grid: (usize, usize),
        queries: Option<&Tensor>,
    ) -> Result<Tokens> {
        if patches.rows() != grid.0 * grid.1 {
            return Err(Error::shape(
                "tokens",
                format!("{} patches for a {}x{} grid", patches.rows(), grid.0, grid.1),
            ));
        }
        let pos = if grid == self.cfg.base_grid() {
            b[self.pos]
        } else {
            let m = g.constant(bicubic_grid_matrix(self.cfg.base_grid(), grid));
            g.matmul(m, b[self.pos])?
        };
        let raw = g.constant(patches.clone());
        let ctx = embed(g, raw, b[self.projector], pos, b[self.cls])?;
        let query = match queries {
            Some(q) if q.rows() > 0 => {
                let crops = g.constant(q.clone());
                Some(embed_queries(g, crops, b[self.projector])?)
            }
            _ => None,
        };
        Ok(Tokens { ctx, query })
    }

    /// One pre-norm attention + MLP block under `policy`.
    pub fn block(
        &self,
        g: &mut Graph,
        b: &Bound,
        blk: &BlockParams,
        t: Tokens,
        policy: FlowPolicy,
        retain: bool,
    ) -> Result<(Tokens, Option<RetainedAttention>)> {
        let d = self.cfg.dim;
        if g.value(t.ctx).cols() != d || t.query.is_some_and(|q| g.value(q).cols() != d) {
            return Err(Error::shape("attention_block", "token width differs from encoder width"));
        }
        let ln1 = (b[blk.ln1.0], b[blk.ln1.1]);
        let (wq, wk, wv, wo) = (
            (b[blk.wq.0], b[blk.wq.1]),
            (b[blk.wk.0], b[blk.wk.1]),
            (b[blk.wv.0], b[blk.wv.1]),
            (b[blk.wo.0], b[blk.wo.1]),
        );
        let n_ctx = g.value(t.ctx).rows();

        let (attn_ctx, attn_query, retained) = match (policy.mode, t.query) {
            (FlowMode::Bidirectional, Some(query)) => {
                let full = g.concat_rows(&[t.ctx, query])?;
                let h = g.layernorm(full, Some(ln1))?;
                let q = linear(g, h, wq)?;
                let k = linear(g, h, wk)?;
                let v = linear(g, h, wv)?;
                let a = g.attention(q, k, v, blk.heads)?;
                let total = g.value(a).rows();
                let ac = g.slice_rows(a, 0, n_ctx)?;
                let aq = g.slice_rows(a, n_ctx, total)?;
                (ac, Some(aq), retain.then_some(RetainedAttention::Joint(a)))
            }
            _ => {
                let h = g.layernorm(t.ctx, Some(ln1))?;
                let q = linear(g, h, wq)?;
                let k = linear(g, h, wk)?;
                let v = linear(g, h, wv)?;
                let ac = g.attention(q, k, v, blk.heads)?;
                let aq = match t.query {
                    Some(query) => {
                        let hq = g.layernorm(query, Some(ln1))?;
                        let qq = linear(g, hq, wq)?;
                        let (kk, vv) = if policy.query_sees_cls {
                            (k, v)
                        } else {
                            (g.slice_rows(k, 1, n_ctx)?, g.slice_rows(v, 1, n_ctx)?)
                        };
                        Some(g.attention(qq, kk, vv, blk.heads)?)
                    }
                    None => None,
                };
                let retained = retain.then_some(RetainedAttention::Split {
                    ctx: ac,
                    query: aq,
                    query_sees_cls: policy.query_sees_cls,
                });
                (ac, aq, retained)
            }
        };

        let residual_mlp = |g: &mut Graph, x: Var, a: Var| -> Result<Var> {
            let proj = linear(g, a, wo)?;
            let x = g.add(x, proj)?;
            let h = g.layernorm(x, Some((b[blk.ln2.0], b[blk.ln2.1])))?;
            let h = linear(g, h, (b[blk.fc1.0], b[blk.fc1.1]))?;
            let h = g.gelu(h);
            let h = linear(g, h, (b[blk.fc2.0], b[blk.fc2.1]))?;
            g.add(x, h)
        };
        let ctx = residual_mlp(g, t.ctx, attn_ctx)?;
        let query = match (t.query, attn_query) {
            (Some(x), Some(a)) => Some(residual_mlp(g, x, a)?),
            _ => None,
        };
        Ok((Tokens { ctx, query }, retained))
    }

    /// Runs every block and the final norm, then splits the output rows.
    pub fn encode(
        &self,
        g: &mut Graph,
        b: &Bound,
        tokens: Tokens,
        grid: (usize, usize),
        policy: FlowPolicy,
        opts: EncodeOptions,
    ) -> Result<EncoderOutput> {
        let n_ctx = g.value(tokens.ctx).rows();
        if n_ctx != grid.0 * grid.1 + 1 {
            return Err(Error::shape(
                "encode",
                format!("{n_ctx} context rows for a {}x{} grid plus class token", grid.0, grid.1),
            ));
        }
        let mut t = tokens;
        let mut retained = None;
        for (i, blk) in self.blocks.iter().enumerate() {
            let last = i + 1 == self.blocks.len();
            let (next, r) = self.block(g, b, blk, t, policy, last && opts.retain_attention)?;
            t = next;
            if last {
                retained = r;
            }
        }
        let norm = (b[self.norm.0], b[self.norm.1]);
        let ctx = g.layernorm(t.ctx, Some(norm))?;
        let query = match t.query {
            Some(q) => Some(g.layernorm(q, Some(norm))?),
            None => None,
        };
        let cls = g.slice_rows(ctx, 0, 1)?;
        let raw = g.slice_rows(ctx, 1, n_ctx)?;
        let n_query = query.map_or(0, |q| g.value(q).rows());
        Ok(EncoderOutput {
            cls,
            raw,
            query,
            n_raw: n_ctx - 1,
            n_query,
            grid,
            attention: retained,
        })
    }

    /// Convenience: embed and encode one view.
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Bound,
        patches: &Tensor,
        grid: (usize, usize),
        queries: Option<&Tensor>,
        policy: FlowPolicy,
        opts: EncodeOptions,
    ) -> Result<EncoderOutput> {
        let tokens = self.tokens(g, b, patches, grid, queries)?;
        self.encode(g, b, tokens, grid, policy, opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> EncoderConfig {
        EncoderConfig {
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_hidden: 12,
            channels: 1,
            patch: 2,
            base_res: 4,
            init_std: 0.5,
        }
    }

    #[test]
    fn parameter_count_matches_registered_tensors() {
        let mut p = Params::new();
        let cfg = tiny();
        Encoder::init(cfg, &mut p, "enc", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.count(), cfg.parameter_count());
    }

    #[test]
    fn bad_config_rejected() {
        let cfg = EncoderConfig { heads: 3, ..tiny() };
        assert!(Encoder::init(cfg, &mut Params::new(), "e", &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn zero_weights_give_final_norm_of_input() {
        let cfg = EncoderConfig { depth: 1, ..tiny() };
        let mut p = Params::new();
        let enc = Encoder::init(cfg, &mut p, "enc", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let untouched = [enc.projector, enc.pos, enc.cls];
        for id in p.ids().collect::<Vec<_>>() {
            let gain = p.name(id).ends_with(".gain");
            if !untouched.contains(&id) && !gain {
                let z = Tensor::zeros(p.get(id).shape());
                *p.get_mut(id) = z;
            }
        }
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let patches = Tensor::randn(&[4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let t = enc.tokens(&mut g, &b, &patches, (2, 2), None).unwrap();
        let out = enc
            .encode(&mut g, &b, t, (2, 2), FlowPolicy::default(), EncodeOptions::default())
            .unwrap();
        let expect = g.layernorm(t.ctx, None).unwrap();
        assert_eq!(g.value(out.raw), &g.value(expect).slice_rows(1, 5));
    }

    #[test]
    fn resized_grid_is_accepted() {
        let mut p = Params::new();
        let enc = Encoder::init(tiny(), &mut p, "enc", &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let patches = Tensor::randn(&[9, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let out = enc
            .forward(&mut g, &b, &patches, (3, 3), None, FlowPolicy::default(), EncodeOptions::default())
            .unwrap();
        assert_eq!(g.value(out.raw).shape(), &[9, 8]);
        assert!(enc
            .forward(&mut g, &b, &patches, (2, 2), None, FlowPolicy::default(), EncodeOptions::default())
            .is_err());
    }
}

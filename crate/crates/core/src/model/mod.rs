//! The DTCA denoiser.
//!
//! Token flow for one forward pass:
//!
//! 1. condition and noised prediction frames are patchified, embedded and
//!    position-tagged, then concatenated along the frame axis;
//! 2. the condition tokens additionally go through Channel-To-Batch Shift and
//!    the global condition linear layer to become causal-attention keys/values;
//! 3. `depth` repetitions of the variant's stages run a DTCA block each
//!    (adaLN-Zero self-attention, causal attention, MLP);
//! 4. a modulated final projection maps tokens back to patches, the last
//!    `F_n` frames are kept and unpatchified into predicted noise.

mod attention;
mod checkpoint;
mod config;
mod params;

pub use attention::{attention, causal_attention, ctbs, stage_plan, variant_plans};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use config::{KeyPool, ModelConfig, QueryScope, Stage, Variant};
pub use params::{Linear, ParamStore};

use crate::diffusion::EpsModel;
use crate::tensor::{Element, Graph, Tensor, Var};
use crate::tokenizer::{PatchGrid, PositionTables};
use crate::{Error, Result};
use rand::Rng;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone)]
struct CausalParams {
    q: Linear,
    kv: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    stage: Stage,
    ada: Linear,
    qkv: Linear,
    proj: Linear,
    causal: Option<CausalParams>,
    fc1: Linear,
    fc2: Linear,
}

/// Sinusoidal embedding of diffusion timesteps, `(B, dim)`.
pub fn timestep_sinusoid<E: Element>(t: &[usize], dim: usize) -> Tensor<E> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let start = out.len();
        out.resize(start + dim, E::zero());
        for i in 0..half {
            let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            out[start + i] = E::from_f64(arg.cos());
            out[start + half + i] = E::from_f64(arg.sin());
        }
    }
    Tensor::from_vec(&[t.len(), dim], out).expect("shape matches")
}

/// DTCA noise predictor with its parameters.
#[derive(Debug, Clone)]
pub struct Model<E: Element = f32> {
    cfg: ModelConfig,
    grid: PatchGrid,
    pos: PositionTables<E>,
    store: ParamStore<E>,
    embed: Linear,
    t_fc1: Linear,
    t_fc2: Linear,
    global_cond: Option<Linear>,
    blocks: Vec<BlockParams>,
    final_ada: Linear,
    final_proj: Linear,
}

impl<E: Element> Model<E> {
    /// Freshly initialized model: truncated-normal(0, 0.02) linear weights,
    /// Xavier-uniform patch embedding, zero biases, and zero adaLN maps,
    /// causal output projections and final projection.
    pub fn new<R: Rng + ?Sized>(cfg: ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.embed_dim;
        let p2 = cfg.patch * cfg.patch;
        let hidden = n * cfg.mlp_ratio;
        let mut s = ParamStore::new();

        let bound = (6.0 / (p2 + n) as f64).sqrt();
        let embed = s.linear_with("embed", Tensor::uniform(&[p2, n], -bound, bound, rng), true);
        let t_fc1 = s.linear("t_embed.fc1", n, n, rng);
        let t_fc2 = s.linear("t_embed.fc2", n, n, rng);
        let global_cond = cfg.causal.then(|| s.linear("global_cond", n, n, rng));

        let mut blocks = Vec::new();
        for d in 0..cfg.depth {
            for (k, &stage) in cfg.variant.stages().iter().enumerate() {
                let name = format!("blocks.{d}.{k}");
                let causal = cfg.causal.then(|| CausalParams {
                    q: s.linear(&format!("{name}.cross.q"), n, n, rng),
                    kv: s.linear(&format!("{name}.cross.kv"), n, 2 * n, rng),
                    out: s.zero_linear(&format!("{name}.cross.out"), n, n),
                });
                blocks.push(BlockParams {
                    stage,
                    ada: s.zero_linear(&format!("{name}.ada"), n, 6 * n),
                    qkv: s.linear(&format!("{name}.attn.qkv"), n, 3 * n, rng),
                    proj: s.linear(&format!("{name}.attn.proj"), n, n, rng),
                    causal,
                    fc1: s.linear(&format!("{name}.mlp.fc1"), n, hidden, rng),
                    fc2: s.linear(&format!("{name}.mlp.fc2"), hidden, n, rng),
                });
            }
        }
        let final_ada = s.zero_linear("final.ada", n, 2 * n);
        let final_proj = s.zero_linear("final.proj", n, p2);

        let grid = PatchGrid::new(cfg.height, cfg.width, cfg.patch)?;
        let pos = PositionTables::new(grid, cfg.frames(), n)?;
        Ok(Self {
            cfg,
            grid,
            pos,
            store: s,
            embed,
            t_fc1,
            t_fc2,
            global_cond,
            blocks,
            final_ada,
            final_proj,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn grid(&self) -> PatchGrid {
        self.grid
    }

    pub fn params(&self) -> &ParamStore<E> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<E> {
        &mut self.store
    }

    pub fn positions(&self) -> &PositionTables<E> {
        &self.pos
    }

    /// Replaces the position tables (e.g. with zeros for equivariance tests).
    pub fn set_positions(&mut self, pos: PositionTables<E>) {
        self.pos = pos;
    }

    /// Number of DTCA blocks (depth times stages per variant).
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_stage(&self, i: usize) -> Stage {
        self.blocks[i].stage
    }

    /// Adds every parameter to `g` as a differentiable leaf.
    pub fn bind(&self, g: &mut Graph<E>) -> Vec<Var> {
        self.store.bind(g)
    }

    /// Conditioning vector `silu(mlp(sinusoid(t)))`, `(B, N)`.
    pub fn timestep_embedding(&self, g: &mut Graph<E>, p: &[Var], t: &[usize]) -> Result<Var> {
        let s = g.constant(timestep_sinusoid(t, self.cfg.embed_dim));
        let h = self.t_fc1.apply(g, p, s)?;
        let h = g.silu(h);
        let h = self.t_fc2.apply(g, p, h)?;
        Ok(g.silu(h))
    }

    /// Patchify, embed and position-tag a `(B, F, H, W)` frame stack whose
    /// first frame sits at `frame_offset`. Returns `(B, C, F, N)`.
    pub fn tokens(&self, g: &mut Graph<E>, p: &[Var], frames: Var, frame_offset: usize) -> Result<Var> {
        let patches = self.grid.patchify_var(g, frames)?;
        let emb = self.embed.apply(g, p, patches)?;
        self.pos.add_to(g, emb, frame_offset)
    }

    /// CTBS followed by the global condition linear layer, flattened to
    /// `(B·s, (C/s)·F_c, N)`. `None` when the causal path is disabled.
    pub fn condition_memory(&self, g: &mut Graph<E>, p: &[Var], cond_tokens: Var) -> Result<Option<Var>> {
        let Some(gc) = &self.global_cond else {
            return Ok(None);
        };
        let shifted = ctbs(g, cond_tokens, self.cfg.shift.max(1))?;
        let s = g.shape(shifted).to_vec();
        let flat = g.reshape(shifted, &[s[0], s[1] * s[2], s[3]])?;
        Ok(Some(gc.apply(g, p, flat)?))
    }

    /// One DTCA block on `(B, C·F, N)` tokens.
    pub fn block_forward(
        &self,
        g: &mut Graph<E>,
        p: &[Var],
        index: usize,
        x: Var,
        cond_vec: Var,
        memory: Option<Var>,
    ) -> Result<Var> {
        let blk = &self.blocks[index];
        self.block_with_stage(g, p, blk, blk.stage, x, cond_vec, memory)
    }

    /// Like [`Model::block_forward`] but overriding the block's stage.
    pub fn block_forward_as(
        &self,
        g: &mut Graph<E>,
        p: &[Var],
        index: usize,
        stage: Stage,
        x: Var,
        cond_vec: Var,
        memory: Option<Var>,
    ) -> Result<Var> {
        self.block_with_stage(g, p, &self.blocks[index], stage, x, cond_vec, memory)
    }

    #[allow(clippy::too_many_arguments)]
    fn block_with_stage(
        &self,
        g: &mut Graph<E>,
        p: &[Var],
        blk: &BlockParams,
        stage: Stage,
        x: Var,
        cond_vec: Var,
        memory: Option<Var>,
    ) -> Result<Var> {
        let n = self.cfg.embed_dim;
        let xs = g.shape(x).to_vec();
        let (b, l) = (xs[0], xs[1]);
        let frames = l / self.grid.tokens();

        let m = blk.ada.apply(g, p, cond_vec)?;
        let chunk = |g: &mut Graph<E>, i: usize| -> Result<Var> {
            let c = g.narrow(m, 1, i * n, n)?;
            Ok(g.expand(c, 1, l)?)
        };
        let (shift1, scale1, gate1) = (chunk(g, 0)?, chunk(g, 1)?, chunk(g, 2)?);
        let (shift2, scale2, gate2) = (chunk(g, 3)?, chunk(g, 4)?, chunk(g, 5)?);

        // self-attention
        let h = modulate(g, x, shift1, scale1)?;
        let qkv = blk.qkv.apply(g, p, h)?;
        let plan = stage_plan(stage, b, self.grid.tokens(), frames, 3 * n)?;
        let grouped = g.rearrange(qkv, &plan)?;
        let a = attention::grouped_self_attention(g, grouped, self.cfg.heads)?;
        let out_plan = stage_plan(stage, b, self.grid.tokens(), frames, n)?.inverse();
        let a = g.rearrange(a, &out_plan)?;
        let a = blk.proj.apply(g, p, a)?;
        let a = g.mul(gate1, a)?;
        let mut x = g.add(x, a)?;

        // causal attention
        if let (Some(cp), Some(mem)) = (&blk.causal, memory) {
            let q = cp.q.apply(g, p, x)?;
            let kv = cp.kv.apply(g, p, mem)?;
            let pooled = self.cfg.shift > 1 && self.cfg.key_pool == KeyPool::Flatten;
            let c = causal_attention(g, q, kv, self.cfg.heads, pooled)?;
            let mut c = cp.out.apply(g, p, c)?;
            if self.cfg.query_scope == QueryScope::PredictionOnly {
                let mask = self.prediction_mask(b, l, frames);
                c = g.mul_const(c, mask)?;
            }
            x = g.add(x, c)?;
        }

        // MLP
        let h = modulate(g, x, shift2, scale2)?;
        let h = blk.fc1.apply(g, p, h)?;
        let h = g.gelu(h);
        let h = blk.fc2.apply(g, p, h)?;
        let h = g.mul(gate2, h)?;
        Ok(g.add(x, h)?)
    }

    /// 1 on prediction-frame tokens, 0 on condition tokens, `(B, C·F, N)`.
    fn prediction_mask(&self, b: usize, l: usize, frames: usize) -> Tensor<E> {
        let n = self.cfg.embed_dim;
        let mut data = Vec::with_capacity(b * l * n);
        for _ in 0..b {
            for tok in 0..l {
                let on = tok % frames >= self.cfg.cond_frames;
                data.extend(std::iter::repeat_n(if on { E::one() } else { E::zero() }, n));
            }
        }
        Tensor::from_vec(&[b, l, n], data).expect("shape matches")
    }

    /// Runs the full denoiser; returns predicted noise `(B, F_n, H, W)`.
    pub fn forward(&self, g: &mut Graph<E>, cond: Var, noised: Var, t: &[usize]) -> Result<Var> {
        let p = self.bind(g);
        self.forward_bound(g, &p, cond, noised, t)
    }

    /// [`Model::forward`] with parameters already bound to `g`.
    pub fn forward_bound(
        &self,
        g: &mut Graph<E>,
        p: &[Var],
        cond: Var,
        noised: Var,
        t: &[usize],
    ) -> Result<Var> {
        let (cs, ns) = (g.shape(cond).to_vec(), g.shape(noised).to_vec());
        let want_c = [cs[0], self.cfg.cond_frames, self.cfg.height, self.cfg.width];
        let want_n = [cs[0], self.cfg.pred_frames, self.cfg.height, self.cfg.width];
        if cs != want_c || ns != want_n {
            return Err(Error::Param(format!(
                "model expects conditions {want_c:?} and noised frames {want_n:?}, got {cs:?} and {ns:?}"
            )));
        }
        if t.len() != cs[0] {
            return Err(Error::Param(format!("{} timesteps for batch of {}", t.len(), cs[0])));
        }
        let (b, f, c, n) = (cs[0], self.cfg.frames(), self.grid.tokens(), self.cfg.embed_dim);

        let cond_tok = self.tokens(g, p, cond, 0)?;
        let pred_tok = self.tokens(g, p, noised, self.cfg.cond_frames)?;
        let z = g.concat(&[cond_tok, pred_tok], 2)?;
        let mut x = g.reshape(z, &[b, c * f, n])?;

        let cond_vec = self.timestep_embedding(g, p, t)?;
        let memory = self.condition_memory(g, p, cond_tok)?;
        for i in 0..self.blocks.len() {
            x = self.block_forward(g, p, i, x, cond_vec, memory)?;
        }

        let m = self.final_ada.apply(g, p, cond_vec)?;
        let shift = g.narrow(m, 1, 0, n)?;
        let shift = g.expand(shift, 1, c * f)?;
        let scale = g.narrow(m, 1, n, n)?;
        let scale = g.expand(scale, 1, c * f)?;
        let h = modulate(g, x, shift, scale)?;
        let out = self.final_proj.apply(g, p, h)?;
        let out = g.reshape(out, &[b, c, f, self.grid.patch_len()])?;
        let out = g.narrow(out, 2, self.cfg.cond_frames, self.cfg.pred_frames)?;
        self.grid.unpatchify_var(g, out)
    }

    /// Convenience: predicted noise as a plain tensor.
    pub fn predict(&self, cond: &Tensor<E>, noised: &Tensor<E>, t: &[usize]) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let x = g.constant(noised.clone());
        let out = self.forward(&mut g, c, x, t)?;
        Ok(g.value(out).clone())
    }

    /// Assembled, position-tagged input tokens `(B, C, F, N)` before any
    /// block has run; used by token-similarity analysis.
    pub fn input_tokens(&self, cond: &Tensor<E>, noised: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let c = g.constant(cond.clone());
        let x = g.constant(noised.clone());
        let ct = self.tokens(&mut g, &p, c, 0)?;
        let pt = self.tokens(&mut g, &p, x, self.cfg.cond_frames)?;
        let z = g.concat(&[ct, pt], 2)?;
        Ok(g.value(z).clone())
    }

    /// Same architecture and values in another precision.
    pub fn cast<F: Element>(&self) -> Model<F> {
        Model {
            cfg: self.cfg.clone(),
            grid: self.grid,
            pos: PositionTables {
                patch_pos: self.pos.patch_pos.cast(),
                frame_pos: self.pos.frame_pos.cast(),
            },
            store: self.store.cast(),
            embed: self.embed,
            t_fc1: self.t_fc1,
            t_fc2: self.t_fc2,
            global_cond: self.global_cond,
            blocks: self.blocks.clone(),
            final_ada: self.final_ada,
            final_proj: self.final_proj,
        }
    }

    /// Model config plus every parameter as f32.
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.to_kv(),
            tensors: self
                .store
                .names()
                .iter()
                .zip(self.store.tensors())
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }

    /// Rebuilds a model from [`Model::to_checkpoint`] output. Entries whose
    /// names are not model fields or parameters are ignored.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (k, v) in &ck.config {
            cfg.set(k, v)?;
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(cfg, &mut rng)?;
        for i in 0..model.store.len() {
            let name = model.store.name(i).to_string();
            let t = ck
                .tensor(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing parameter `{name}`")))?;
            if t.shape() != model.store.get(i).shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "`{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    model.store.get(i).shape()
                ))
                .into());
            }
            *model.store.get_mut(i) = t.cast();
        }
        Ok(model)
    }
}

/// Layer norm without affine terms followed by `h (1 + scale) + shift`.
fn modulate<E: Element>(g: &mut Graph<E>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let h = g.layer_norm(x, g.shape(x).len() - 1, None, None, LN_EPS)?;
    let s1 = g.add_scalar(scale, 1.0);
    let h = g.mul(h, s1)?;
    Ok(g.add(h, shift)?)
}

impl<E: Element> EpsModel<E> for Model<E> {
    fn predict_eps(&self, g: &mut Graph<E>, cond: Var, noised: Var, t: &[usize]) -> Result<Var> {
        self.forward(g, cond, noised, t)
    }
}

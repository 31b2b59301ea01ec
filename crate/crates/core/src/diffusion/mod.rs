//! Diffusion transformer over tokenizer latents.
//!
//! Each block is adaLN-Zero modulated self-attention, an unmodulated temporal
//! attention over the start/end frame tokens, and a modulated feed-forward. The
//! condition vector is the timestep embedding plus (optionally) the embedding of
//! the standardized start/end cosine similarity.

pub mod conditioning;
pub mod flow;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DatasetStats, ModelKind};
use crate::error::{EdenError, Result};
use crate::frame::{frames_to_tensor, Frame};
use crate::nn::{Attention, LayerNorm, Linear, Mlp, ParamBuilder, ParamStore};
use crate::seed;
use crate::tokenizer::{
    group_context, PatchEmbed, PositionEmbedding, TemporalAttention, TokenGrid, Tokenizer,
};

pub use conditioning::{
    cosine_similarity, difference_context, timestep_features, DifferenceEmbedder, TimestepEmbedder,
};
pub use flow::{
    euler_integrate, flow_loss, forward_sample, forward_sample_batch, standard_normal,
    velocity_target, NoisedLatent, VelocityField,
};

/// Denoising steps used when none are requested.
pub const DEFAULT_STEPS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiTConfig {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    /// `None` means `hidden_dim / 64` (at least one).
    pub heads: Option<usize>,
    /// Must equal the tokenizer's latent dimension.
    pub latent_dim: usize,
    /// Must equal the tokenizer's patch size.
    pub patch_size: usize,
    pub mlp_ratio: usize,
    pub native_resolution: [usize; 2],
    /// Ablation toggle for the start/end difference embedding.
    pub difference_embedding: bool,
}

impl Default for DiTConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 768,
            n_blocks: 12,
            heads: None,
            latent_dim: 16,
            patch_size: 16,
            mlp_ratio: 4,
            native_resolution: [256, 448],
            difference_embedding: true,
        }
    }
}

impl DiTConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or((self.hidden_dim / 64).max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(EdenError::Config {
                path: format!("dit.{field}"),
                message,
            })
        };
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads()) {
            return bad(
                "hidden_dim",
                format!(
                    "{} is not divisible by {} heads",
                    self.hidden_dim,
                    self.heads()
                ),
            );
        }
        if self.n_blocks == 0 {
            return bad("n_blocks", "must be at least 1".into());
        }
        if self.latent_dim == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad(
                "latent_dim",
                "latent_dim, patch_size and mlp_ratio must be positive".into(),
            );
        }
        let [h, w] = self.native_resolution;
        let s = 2 * self.patch_size;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return bad(
                "native_resolution",
                format!("{h}x{w} is not divisible by {s}"),
            );
        }
        Ok(())
    }

    /// Errors unless the tokenizer produces latents this model can consume.
    pub fn check_compatible(&self, tok: &crate::tokenizer::TokenizerConfig) -> Result<()> {
        if self.latent_dim != tok.latent_dim || self.patch_size != tok.patch_size {
            return Err(EdenError::Checkpoint(format!(
                "diffusion model (latent_dim {}, patch {}) does not match tokenizer (latent_dim {}, patch {})",
                self.latent_dim, self.patch_size, tok.latent_dim, tok.patch_size
            )));
        }
        Ok(())
    }
}

/// The six per-block modulation vectors, each `(batch, 1, dim)`. Scales are
/// applied as `1 + gamma`.
#[derive(Debug, Clone)]
pub struct ModulationParams {
    pub alpha1: Tensor,
    pub beta1: Tensor,
    pub gamma1: Tensor,
    pub alpha2: Tensor,
    pub beta2: Tensor,
    pub gamma2: Tensor,
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale + 1.0)?)?.broadcast_add(shift)?)
}

#[derive(Debug, Clone)]
pub struct DitBlock {
    ada: Linear,
    norm: LayerNorm,
    attn: Attention,
    pub temporal: TemporalAttention,
    ff: Mlp,
}

impl DitBlock {
    fn new(b: &mut ParamBuilder, cfg: &DiTConfig) -> Result<Self> {
        let (d, h) = (cfg.hidden_dim, cfg.heads());
        Ok(Self {
            ada: Linear::zeros(&mut b.sub("ada"), d, 6 * d)?,
            norm: LayerNorm::plain(),
            attn: Attention::new(&mut b.sub("attn"), d, h, false)?,
            temporal: TemporalAttention::new(&mut b.sub("temporal"), d, h, true)?,
            ff: Mlp::new(&mut b.sub("ff"), d, cfg.mlp_ratio * d, d)?,
        })
    }

    /// `SiLU(cond)` through a linear map, split in the order
    /// `(alpha1, beta1, gamma1, alpha2, beta2, gamma2)`.
    pub fn modulation(&self, cond: &Tensor) -> Result<ModulationParams> {
        let (b, d) = cond.dims2()?;
        let out = self.ada.forward(&cond.silu()?)?.reshape((b, 1, 6 * d))?;
        let part = |i: usize| out.narrow(D::Minus1, i * d, d);
        Ok(ModulationParams {
            alpha1: part(0)?,
            beta1: part(1)?,
            gamma1: part(2)?,
            alpha2: part(3)?,
            beta2: part(4)?,
            gamma2: part(5)?,
        })
    }

    /// `x: (batch, n, dim)`, contexts `(batch, n, 4, dim)`, `cond: (batch, dim)`.
    pub fn forward(
        &self,
        x: &Tensor,
        ctx0: &Tensor,
        ctx1: &Tensor,
        cond: &Tensor,
    ) -> Result<Tensor> {
        let m = self.modulation(cond)?;
        let h = modulate(&self.norm.forward(x)?, &m.beta1, &m.gamma1)?;
        let x = (x + self.attn.forward(&h, &h)?.broadcast_mul(&m.alpha1)?)?;
        let x = self.temporal.forward(&x, ctx0, ctx1)?;
        let h = modulate(&self.norm.forward(&x)?, &m.beta2, &m.gamma2)?;
        Ok((&x + self.ff.forward(&h)?.broadcast_mul(&m.alpha2)?)?)
    }
}

#[derive(Debug, Clone)]
struct FinalLayer {
    ada: Linear,
    linear: Linear,
}

impl FinalLayer {
    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (b, d) = cond.dims2()?;
        let mods = self.ada.forward(&cond.silu()?)?.reshape((b, 1, 2 * d))?;
        let h = modulate(
            &LayerNorm::plain().forward(x)?,
            &mods.narrow(D::Minus1, 0, d)?,
            &mods.narrow(D::Minus1, d, d)?,
        )?;
        self.linear.forward(&h)
    }
}

/// Start/end frame conditioning that stays fixed across denoising steps.
#[derive(Debug, Clone)]
pub struct DitContext {
    pub ctx0: Tensor,
    pub ctx1: Tensor,
    /// Difference embedding `(batch, dim)`, absent when the toggle is off.
    pub difference: Option<Tensor>,
    pub grid: (usize, usize),
}

#[derive(Debug)]
pub struct Dit {
    cfg: DiTConfig,
    store: ParamStore,
    latent_in: Linear,
    pos: PositionEmbedding,
    context: PatchEmbed,
    time: TimestepEmbedder,
    diff: Option<DifferenceEmbedder>,
    pub blocks: Vec<DitBlock>,
    head: FinalLayer,
}

impl Dit {
    pub fn new(cfg: DiTConfig, init_seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(init_seed, seed::INIT, &[1]);
        let [h, w] = cfg.native_resolution;
        let (d, p) = (cfg.hidden_dim, cfg.patch_size);
        let parts = {
            let mut b = store.builder(&mut rng);
            let latent_in = Linear::new(&mut b.sub("latent_in"), cfg.latent_dim, d)?;
            let pos = PositionEmbedding::new(&mut b.sub("pos"), h / (2 * p), w / (2 * p), d)?;
            let context = PatchEmbed::new(&mut b.sub("context"), p, d, (h / p, w / p))?;
            let time = TimestepEmbedder::new(&mut b.sub("time"), d)?;
            let diff = if cfg.difference_embedding {
                Some(DifferenceEmbedder::new(&mut b.sub("difference"), d)?)
            } else {
                None
            };
            let blocks = (0..cfg.n_blocks)
                .map(|i| DitBlock::new(&mut b.sub("blocks").sub(i), &cfg))
                .collect::<Result<Vec<_>>>()?;
            let head = FinalLayer {
                ada: Linear::zeros(&mut b.sub("head").sub("ada"), d, 2 * d)?,
                linear: Linear::zeros(&mut b.sub("head").sub("linear"), d, cfg.latent_dim)?,
            };
            (latent_in, pos, context, time, diff, blocks, head)
        };
        let (latent_in, pos, context, time, diff, blocks, head) = parts;
        Ok(Self {
            cfg,
            store,
            latent_in,
            pos,
            context,
            time,
            diff,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &DiTConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    /// Embeds and groups the start/end frames `(batch, h, w, 3)` and the
    /// per-item difference contexts.
    pub fn prepare_context(
        &self,
        i0: &Tensor,
        i1: &Tensor,
        diff_ctx: &[f64],
    ) -> Result<DitContext> {
        if i0.dims() != i1.dims() {
            return Err(EdenError::shape(i0.dims(), i1.dims()));
        }
        let (b, h, w, _) = i0.dims4()?;
        let s = 2 * self.cfg.patch_size;
        if h % s != 0 || w % s != 0 {
            return Err(EdenError::Dimension(format!(
                "resolution {h}x{w} is not divisible by {s}"
            )));
        }
        if diff_ctx.len() != b {
            return Err(EdenError::shape(b, diff_ctx.len()));
        }
        let (i0, i1) = (i0.to_dtype(self.dtype())?, i1.to_dtype(self.dtype())?);
        let difference = match &self.diff {
            Some(e) => Some(e.forward(diff_ctx, self.dtype(), self.device())?),
            None => None,
        };
        Ok(DitContext {
            ctx0: group_context(&self.context.forward(&i0)?)?,
            ctx1: group_context(&self.context.forward(&i1)?)?,
            difference,
            grid: (h / s, w / s),
        })
    }

    /// Timestep embedding plus difference embedding, `(batch, dim)`.
    pub fn condition(&self, t: &[f64], ctx: &DitContext) -> Result<Tensor> {
        let temb = self.time.forward(t, self.dtype(), self.device())?;
        match &ctx.difference {
            Some(d) => Ok((temb + d)?),
            None => Ok(temb),
        }
    }

    /// Velocity prediction for `x_t: (batch, n, c)` at per-item times `t`.
    pub fn velocity(&self, x_t: &Tensor, t: &[f64], ctx: &DitContext) -> Result<Tensor> {
        let (b, n, c) = x_t.dims3()?;
        let (gh, gw) = ctx.grid;
        if n != gh * gw || c != self.cfg.latent_dim || t.len() != b || ctx.ctx0.dims()[0] != b {
            return Err(EdenError::Dimension(format!(
                "latent {:?} with {} times does not match context grid {gh}x{gw} and latent_dim {}",
                x_t.dims(),
                t.len(),
                self.cfg.latent_dim
            )));
        }
        let cond = self.condition(t, ctx)?;
        let tokens = self.latent_in.forward(&x_t.to_dtype(self.dtype())?)?;
        let mut x = TokenGrid::new(tokens, gh, gw)?
            .add_position(&self.pos)?
            .tokens;
        for block in &self.blocks {
            x = block.forward(&x, &ctx.ctx0, &ctx.ctx1, &cond)?;
        }
        self.head.forward(&x, &cond)
    }

    /// Single-triplet velocity from frames; the difference context is derived
    /// from `stats`.
    pub fn predict_velocity(
        &self,
        x_t: &NoisedLatent,
        i0: &Frame,
        i1: &Frame,
        stats: Option<&DatasetStats>,
    ) -> Result<Tensor> {
        let stats = stats.ok_or_else(|| {
            EdenError::MissingStats("difference context needs dataset statistics".into())
        })?;
        let ctx = self.frame_context(i0, i1, stats)?;
        let x = if x_t.x_t.rank() == 2 {
            x_t.x_t.unsqueeze(0)?
        } else {
            x_t.x_t.clone()
        };
        self.velocity(&x, &[x_t.t], &ctx)
    }

    pub fn frame_context(
        &self,
        i0: &Frame,
        i1: &Frame,
        stats: &DatasetStats,
    ) -> Result<DitContext> {
        let diff = difference_context(i0, i1, stats)?;
        let t0 = frames_to_tensor(&[i0], self.dtype(), self.device())?;
        let t1 = frames_to_tensor(&[i1], self.dtype(), self.device())?;
        self.prepare_context(&t0, &t1, &[diff])
    }

    pub fn to_checkpoint(&self, stats: Option<DatasetStats>, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: ModelKind::Dit,
            config: Checkpoint::snapshot(&self.cfg, None)?,
            stats,
            step,
            params: self.store.export()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Dit)?;
        let cfg: DiTConfig = ckpt.model_config()?;
        let dit = Self::new(cfg, 0, dtype)?;
        dit.store.import(&ckpt.model_params(), true)?;
        Ok(dit)
    }
}

/// The model's velocity field for one prepared context (constant across steps).
pub struct DitField<'a> {
    pub dit: &'a Dit,
    pub ctx: &'a DitContext,
}

impl VelocityField for DitField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        let b = x.dims()[0];
        self.dit.velocity(x, &vec![t; b], self.ctx)
    }
}

/// Draws standard-normal latents from `seed`, integrates `steps` Euler steps and
/// rescales by `latent_std`, giving tokenizer-space latents `(batch, n, c)`.
pub fn euler_sample(
    dit: &Dit,
    ctx: &DitContext,
    steps: usize,
    seed_value: u64,
    latent_std: f64,
) -> Result<Tensor> {
    let b = ctx.ctx0.dims()[0];
    let n = ctx.grid.0 * ctx.grid.1;
    let mut rng = seed::rng(seed_value, seed::SAMPLING, &[]);
    let noise = standard_normal(
        &[b, n, dit.cfg.latent_dim],
        &mut rng,
        dit.dtype(),
        dit.device(),
    )?;
    let x = euler_integrate(&noise, steps, &DitField { dit, ctx })?;
    Ok((x * latent_std)?)
}

/// A tokenizer and diffusion model checked to be compatible, with the
/// statistics recorded at training time.
#[derive(Debug)]
pub struct Interpolator {
    pub tokenizer: Tokenizer,
    pub dit: Dit,
    pub stats: DatasetStats,
}

impl Interpolator {
    pub fn new(tokenizer: Tokenizer, dit: Dit, stats: DatasetStats) -> Result<Self> {
        dit.config().check_compatible(tokenizer.config())?;
        stats.validate()?;
        stats.latent_std()?;
        Ok(Self {
            tokenizer,
            dit,
            stats,
        })
    }

    pub fn from_checkpoints(tok: &Checkpoint, dit: &Checkpoint, dtype: DType) -> Result<Self> {
        let tokenizer = Tokenizer::from_checkpoint(tok, dtype)?;
        let model = Dit::from_checkpoint(dit, dtype)?;
        let stats = dit.stats.ok_or_else(|| {
            EdenError::MissingStats("diffusion checkpoint carries no dataset statistics".into())
        })?;
        Self::new(tokenizer, model, stats)
    }

    /// Generates the middle frame between `i0` and `i1`.
    pub fn interpolate(
        &self,
        i0: &Frame,
        i1: &Frame,
        steps: usize,
        seed_value: u64,
    ) -> Result<Frame> {
        if i0.dims() != i1.dims() {
            return Err(EdenError::shape(i0.dims(), i1.dims()));
        }
        self.tokenizer
            .config()
            .check_resolution(i0.height(), i0.width())?;
        let ctx = self.dit.frame_context(i0, i1, &self.stats)?;
        let latent = euler_sample(&self.dit, &ctx, steps, seed_value, self.stats.latent_std()?)?;
        self.tokenizer.decode_frames(&latent, i0, i1)
    }
}

//! Transformer tokenizer: compresses an intermediate frame into a small set of
//! latent tokens while attending to the start and end frames, and decodes the
//! tokens back to pixels.

pub mod attention;
pub mod pos_embed;
pub mod tokens;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, DatasetStats, ModelKind};
use crate::error::{EdenError, Result};
use crate::frame::{frames_to_tensor, tensor_to_frames, Frame};
use crate::nn::{Init, LayerNorm, Linear, Mlp, ParamBuilder, ParamStore};
use crate::seed;

pub use attention::{temporal_sequence, PyramidFusion, TemporalAttention, TEMPORAL_CENTER};
pub use pos_embed::PositionEmbedding;
pub use tokens::{
    group_context, patchify, pool_tokens, unpatchify, upsample_tokens, upsample_tokens_bilinear,
    PatchEmbed, TokenGrid,
};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub latent_dim: usize,
    /// Attention heads; `None` means `hidden_dim / 64` (at least one).
    pub heads: Option<usize>,
    pub mlp_ratio: usize,
    /// Resolution `(height, width)` the position tables are sized for.
    pub native_resolution: [usize; 2],
    pub decoder_upsample: UpsampleMode,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            patch_size: 16,
            hidden_dim: 768,
            n_blocks: 4,
            latent_dim: 16,
            heads: None,
            mlp_ratio: 4,
            native_resolution: [256, 448],
            decoder_upsample: UpsampleMode::Nearest,
        }
    }
}

impl TokenizerConfig {
    pub fn heads(&self) -> usize {
        self.heads.unwrap_or((self.hidden_dim / 64).max(1))
    }

    /// Pixel side of the block one latent token covers.
    pub fn block_size(&self) -> usize {
        2 * self.patch_size
    }

    pub fn large_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.patch_size, w / self.patch_size)
    }

    pub fn small_grid(&self, h: usize, w: usize) -> (usize, usize) {
        (h / self.block_size(), w / self.block_size())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(EdenError::Config {
                path: format!("tokenizer.{field}"),
                message,
            })
        };
        if self.patch_size == 0 {
            return bad("patch_size", "must be positive".into());
        }
        if self.n_blocks == 0 {
            return bad("n_blocks", "must be at least 1".into());
        }
        if self.latent_dim == 0 || self.mlp_ratio == 0 {
            return bad(
                "latent_dim",
                "latent_dim and mlp_ratio must be positive".into(),
            );
        }
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
        let [h, w] = self.native_resolution;
        if h == 0 || w == 0 || h % self.block_size() != 0 || w % self.block_size() != 0 {
            return bad(
                "native_resolution",
                format!("{h}x{w} is not divisible by {}", self.block_size()),
            );
        }
        Ok(())
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let s = self.block_size();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(EdenError::Dimension(format!(
                "resolution {h}x{w} is not divisible by 2 x patch size = {s}"
            )));
        }
        Ok(())
    }
}

/// Per-token Gaussian posterior `(batch, n, c)`; the log-variance is clamped
/// to `[LOGVAR_MIN, LOGVAR_MAX]` on construction.
#[derive(Debug, Clone)]
pub struct LatentPosterior {
    pub mean: Tensor,
    pub logvar: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl LatentPosterior {
    pub fn new(mean: Tensor, logvar: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        if mean.dims() != logvar.dims() {
            return Err(EdenError::shape(mean.dims(), logvar.dims()));
        }
        let (_, n, _) = mean.dims3()?;
        if n != grid_h * grid_w {
            return Err(EdenError::Dimension(format!(
                "{n} latent tokens do not fill a {grid_h}x{grid_w} grid"
            )));
        }
        Ok(Self {
            logvar: logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
            mean,
            grid_h,
            grid_w,
        })
    }

    /// `mean + exp(logvar / 2) * noise`.
    pub fn reparameterize(&self, noise: &Tensor) -> Result<Tensor> {
        if noise.dims() != self.mean.dims() {
            return Err(EdenError::shape(self.mean.dims(), noise.dims()));
        }
        let std = (&self.logvar * 0.5)?.exp()?;
        Ok((&self.mean + (std * noise.to_dtype(self.mean.dtype())?)?)?)
    }
}

/// Fusion, temporal attention and feed-forward, each a pre-norm residual on the
/// small-scale stream.
#[derive(Debug, Clone)]
pub struct TokenizerBlock {
    pub fusion: PyramidFusion,
    pub temporal: TemporalAttention,
    ff_norm: LayerNorm,
    ff: Mlp,
}

impl TokenizerBlock {
    fn new(b: &mut ParamBuilder, cfg: &TokenizerConfig) -> Result<Self> {
        let (d, h) = (cfg.hidden_dim, cfg.heads());
        Ok(Self {
            fusion: PyramidFusion::new(&mut b.sub("fusion"), d, h, false)?,
            temporal: TemporalAttention::new(&mut b.sub("temporal"), d, h, false)?,
            ff_norm: LayerNorm::new(&mut b.sub("ff_norm"), d)?,
            ff: Mlp::new(&mut b.sub("ff"), d, cfg.mlp_ratio * d, d)?,
        })
    }

    pub fn forward(
        &self,
        stream: &TokenGrid,
        large: &TokenGrid,
        ctx0: &Tensor,
        ctx1: &Tensor,
    ) -> Result<TokenGrid> {
        let fused = self.fusion.forward(stream, large)?;
        let x = self.temporal.forward(&fused.tokens, ctx0, ctx1)?;
        let x = (&x + self.ff.forward(&self.ff_norm.forward(&x)?)?)?;
        stream.with_tokens(x)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    patch: PatchEmbed,
    context: PatchEmbed,
    small_pos: PositionEmbedding,
    pub blocks: Vec<TokenizerBlock>,
    norm: LayerNorm,
    to_latent: Linear,
}

impl Encoder {
    fn new(b: &mut ParamBuilder, cfg: &TokenizerConfig) -> Result<Self> {
        let [h, w] = cfg.native_resolution;
        let (d, p) = (cfg.hidden_dim, cfg.patch_size);
        let small = cfg.small_grid(h, w);
        Ok(Self {
            patch: PatchEmbed::new(&mut b.sub("patch"), p, d, cfg.large_grid(h, w))?,
            context: PatchEmbed::new(&mut b.sub("context"), p, d, cfg.large_grid(h, w))?,
            small_pos: PositionEmbedding::new(&mut b.sub("small_pos"), small.0, small.1, d)?,
            blocks: (0..cfg.n_blocks)
                .map(|i| TokenizerBlock::new(&mut b.sub("blocks").sub(i), cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut b.sub("norm"), d)?,
            to_latent: Linear::new(&mut b.sub("to_latent"), d, 2 * cfg.latent_dim)?,
        })
    }

    pub fn patch_embed(&self, frames: &Tensor) -> Result<TokenGrid> {
        self.patch.forward(frames)
    }

    fn forward(&self, i0: &Tensor, it: &Tensor, i1: &Tensor) -> Result<LatentPosterior> {
        let large = self.patch.forward(it)?;
        let mut stream = pool_tokens(&large)?.add_position(&self.small_pos)?;
        let ctx0 = group_context(&self.context.forward(i0)?)?;
        let ctx1 = group_context(&self.context.forward(i1)?)?;
        for block in &self.blocks {
            stream = block.forward(&stream, &large, &ctx0, &ctx1)?;
        }
        let out = self
            .to_latent
            .forward(&self.norm.forward(&stream.tokens)?)?;
        let c = out.dim(D::Minus1)? / 2;
        LatentPosterior::new(
            out.narrow(2, 0, c)?,
            out.narrow(2, c, c)?,
            stream.grid_h,
            stream.grid_w,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    from_latent: Linear,
    small_pos: PositionEmbedding,
    large_pos: PositionEmbedding,
    context: PatchEmbed,
    pub blocks: Vec<TokenizerBlock>,
    norm: LayerNorm,
    to_pixels: Linear,
    patch: usize,
    upsample: UpsampleMode,
}

impl Decoder {
    fn new(b: &mut ParamBuilder, cfg: &TokenizerConfig) -> Result<Self> {
        let [h, w] = cfg.native_resolution;
        let (d, p) = (cfg.hidden_dim, cfg.patch_size);
        let (small, large) = (cfg.small_grid(h, w), cfg.large_grid(h, w));
        let out_dim = cfg.block_size() * cfg.block_size() * 3;
        Ok(Self {
            from_latent: Linear::new(&mut b.sub("from_latent"), cfg.latent_dim, d)?,
            small_pos: PositionEmbedding::new(&mut b.sub("small_pos"), small.0, small.1, d)?,
            large_pos: PositionEmbedding::new(&mut b.sub("large_pos"), large.0, large.1, d)?,
            context: PatchEmbed::new(&mut b.sub("context"), p, d, large)?,
            blocks: (0..cfg.n_blocks)
                .map(|i| TokenizerBlock::new(&mut b.sub("blocks").sub(i), cfg))
                .collect::<Result<_>>()?,
            norm: LayerNorm::new(&mut b.sub("norm"), d)?,
            to_pixels: Linear::with_init(
                &mut b.sub("to_pixels"),
                d,
                out_dim,
                Init::Xavier,
                Init::Constant(0.5),
            )?,
            patch: p,
            upsample: cfg.decoder_upsample,
        })
    }

    /// Unclamped pixels `(batch, h, w, 3)`; the resolution is taken from `i0`.
    fn forward(&self, latent: &Tensor, i0: &Tensor, i1: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = i0.dims4()?;
        let block = 2 * self.patch;
        let (sh, sw) = (h / block, w / block);
        let (b, n, _) = latent.dims3()?;
        if h % block != 0 || w % block != 0 || n != sh * sw {
            return Err(EdenError::Dimension(format!(
                "{n} latent tokens do not match a {h}x{w} frame with {block}x{block} token blocks"
            )));
        }
        let mut stream = TokenGrid::new(self.from_latent.forward(latent)?, sh, sw)?
            .add_position(&self.small_pos)?;
        let ctx0 = group_context(&self.context.forward(i0)?)?;
        let ctx1 = group_context(&self.context.forward(i1)?)?;
        for blk in &self.blocks {
            let large = match self.upsample {
                UpsampleMode::Nearest => upsample_tokens(&stream)?,
                UpsampleMode::Bilinear => upsample_tokens_bilinear(&stream)?,
            }
            .add_position(&self.large_pos)?;
            stream = blk.forward(&stream, &large, &ctx0, &ctx1)?;
        }
        let pixels = self
            .to_pixels
            .forward(&self.norm.forward(&stream.tokens)?)?;
        debug_assert_eq!(pixels.dims()[0], b);
        unpatchify(&pixels, sh, sw, block)
    }
}

/// Encoder and decoder with their parameters.
#[derive(Debug)]
pub struct Tokenizer {
    cfg: TokenizerConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl Tokenizer {
    pub fn new(cfg: TokenizerConfig, init_seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(init_seed, seed::INIT, &[0]);
        let (encoder, decoder) = {
            let mut b = store.builder(&mut rng);
            (
                Encoder::new(&mut b.sub("encoder"), &cfg)?,
                Decoder::new(&mut b.sub("decoder"), &cfg)?,
            )
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_triplet(&self, i0: &Tensor, it: &Tensor, i1: &Tensor) -> Result<()> {
        if i0.dims() != it.dims() || i1.dims() != it.dims() {
            return Err(EdenError::Dimension(format!(
                "triplet frames differ in shape: {:?} {:?} {:?}",
                i0.dims(),
                it.dims(),
                i1.dims()
            )));
        }
        let (_, h, w, _) = it.dims4()?;
        self.cfg.check_resolution(h, w)
    }

    /// Posterior over the latent tokens of `it` given its neighbours; all
    /// inputs are `(batch, h, w, 3)`.
    pub fn encode(&self, i0: &Tensor, it: &Tensor, i1: &Tensor) -> Result<LatentPosterior> {
        self.check_triplet(i0, it, i1)?;
        self.encoder.forward(i0, it, i1)
    }

    /// Decoder output before clamping; training losses are taken on this.
    pub fn decode_raw(&self, latent: &Tensor, i0: &Tensor, i1: &Tensor) -> Result<Tensor> {
        if i0.dims() != i1.dims() {
            return Err(EdenError::shape(i0.dims(), i1.dims()));
        }
        let (_, h, w, _) = i0.dims4()?;
        self.cfg.check_resolution(h, w)?;
        let (_, _, c) = latent.dims3()?;
        if c != self.cfg.latent_dim {
            return Err(EdenError::shape(self.cfg.latent_dim, c));
        }
        self.decoder.forward(latent, i0, i1)
    }

    /// Pixels clamped to `[0, 1]`.
    pub fn decode(&self, latent: &Tensor, i0: &Tensor, i1: &Tensor) -> Result<Tensor> {
        Ok(self.decode_raw(latent, i0, i1)?.clamp(0.0, 1.0)?)
    }

    pub fn encode_frames(&self, i0: &Frame, it: &Frame, i1: &Frame) -> Result<LatentPosterior> {
        let dev = self.store.device().clone();
        let t = |f: &Frame| frames_to_tensor(&[f], self.dtype(), &dev);
        self.encode(&t(i0)?, &t(it)?, &t(i1)?)
    }

    pub fn decode_frames(&self, latent: &Tensor, i0: &Frame, i1: &Frame) -> Result<Frame> {
        let dev = self.store.device().clone();
        let t = |f: &Frame| frames_to_tensor(&[f], self.dtype(), &dev);
        let out = self.decode(&latent.to_dtype(self.dtype())?, &t(i0)?, &t(i1)?)?;
        Ok(tensor_to_frames(&out)?.remove(0))
    }

    pub fn to_checkpoint(&self, stats: Option<DatasetStats>, step: u64) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: ModelKind::Tokenizer,
            config: Checkpoint::snapshot(&self.cfg, None)?,
            stats,
            step,
            params: self.store.export()?,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Tokenizer)?;
        let cfg: TokenizerConfig = ckpt.model_config()?;
        let tok = Self::new(cfg, 0, dtype)?;
        tok.store.import(&ckpt.model_params(), true)?;
        Ok(tok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn desk_cfg() -> TokenizerConfig {
        TokenizerConfig {
            patch_size: 8,
            hidden_dim: 32,
            n_blocks: 2,
            latent_dim: 16,
            heads: Some(2),
            mlp_ratio: 2,
            native_resolution: [64, 64],
            decoder_upsample: UpsampleMode::Nearest,
        }
    }

    fn frames(b: usize, h: usize, w: usize, v: f64) -> Tensor {
        (Tensor::ones((b, h, w, 3), DType::F64, &Device::Cpu).unwrap() * v).unwrap()
    }

    #[test]
    fn defaults_follow_reference_sizes() {
        let c = TokenizerConfig::default();
        assert_eq!(
            (c.patch_size, c.hidden_dim, c.n_blocks, c.latent_dim),
            (16, 768, 4, 16)
        );
        assert_eq!(c.heads(), 12);
        assert_eq!(c.small_grid(256, 448), (8, 14));
        assert_eq!(c.large_grid(256, 448), (16, 28));
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = desk_cfg();
        c.heads = Some(3);
        assert!(c.validate().is_err());
        let mut c = desk_cfg();
        c.n_blocks = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encoder_and_decoder_shapes() {
        let tok = Tokenizer::new(desk_cfg(), 1, DType::F64).unwrap();
        let f = frames(2, 64, 64, 0.5);
        let post = tok.encode(&f, &f, &f).unwrap();
        assert_eq!(post.mean.dims(), &[2, 16, 16]);
        assert_eq!((post.grid_h, post.grid_w), (4, 4));
        let out = tok.decode(&post.mean, &f, &f).unwrap();
        assert_eq!(out.dims(), &[2, 64, 64, 3]);
        // non-native resolution goes through interpolated position tables
        let g = frames(1, 32, 48, 0.2);
        let post = tok.encode(&g, &g, &g).unwrap();
        assert_eq!(post.mean.dims(), &[1, 6, 16]);
        assert_eq!(
            tok.decode(&post.mean, &g, &g).unwrap().dims(),
            &[1, 32, 48, 3]
        );
    }

    #[test]
    fn resolution_errors() {
        let tok = Tokenizer::new(desk_cfg(), 1, DType::F64).unwrap();
        let a = frames(1, 64, 64, 0.5);
        let b = frames(1, 32, 64, 0.5);
        assert!(tok.encode(&a, &b, &a).is_err());
        let odd = frames(1, 24, 64, 0.5);
        assert!(tok.encode(&odd, &odd, &odd).is_err());
        let latent = Tensor::zeros((1, 5, 16), DType::F64, &Device::Cpu).unwrap();
        assert!(tok.decode(&latent, &a, &a).is_err());
    }

    #[test]
    fn reparameterize_cases() {
        let dev = Device::Cpu;
        let t = |v: f64| Tensor::new(&[[[v]]], &dev).unwrap();
        let val = |x: Tensor| x.flatten_all().unwrap().to_vec1::<f64>().unwrap()[0];
        let p = LatentPosterior::new(t(0.0), t(0.0), 1, 1).unwrap();
        assert_eq!(val(p.reparameterize(&t(0.37)).unwrap()), 0.37);
        let p = LatentPosterior::new(t(1.0), t(4f64.ln()), 1, 1).unwrap();
        assert!((val(p.reparameterize(&t(0.5)).unwrap()) - 2.0).abs() < 1e-12);
        let p = LatentPosterior::new(t(0.3), t(f64::NEG_INFINITY), 1, 1).unwrap();
        assert_eq!(val(p.logvar.clone()), LOGVAR_MIN);
        assert!((val(p.reparameterize(&t(1.0)).unwrap()) - 0.3).abs() < 1e-6);
        assert!(p
            .reparameterize(&Tensor::zeros((1, 1, 2), DType::F64, &dev).unwrap())
            .is_err());
    }
}

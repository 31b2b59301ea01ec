//! Tokenizer objective: L1 + perceptual + patch adversarial + KL.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EdenError, Result};
use crate::nn::{Init, ParamBuilder, ParamStore};
use crate::seed;
use crate::tokenizer::LatentPosterior;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub kl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            perceptual: 1.0,
            adversarial: 0.5,
            kl: 1.0e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l1", self.l1),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
            ("kl", self.kl),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(EdenError::Config {
                    path: format!("loss_weights.{name}"),
                    message: format!("must be finite and non-negative, got {v}"),
                });
            }
        }
        Ok(())
    }
}

/// Maps `(batch, h, w, 3)` frames to a list of feature arrays.
pub trait PerceptualExtractor: Send + Sync {
    fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>>;
}

/// Pixel-space stand-in for a learned perceptual network: the image itself plus
/// horizontal and vertical finite differences at full and half resolution.
/// It is a cheap proxy and makes no claim of matching LPIPS.
#[derive(Debug, Clone, Copy, Default)]
pub struct EdgePyramid;

impl EdgePyramid {
    fn edges(x: &Tensor) -> Result<[Tensor; 2]> {
        let (_, h, w, _) = x.dims4()?;
        let dx = (x.narrow(2, 1, w - 1)? - x.narrow(2, 0, w - 1)?)?;
        let dy = (x.narrow(1, 1, h - 1)? - x.narrow(1, 0, h - 1)?)?;
        Ok([dx, dy])
    }
}

impl PerceptualExtractor for EdgePyramid {
    fn features(&self, frames: &Tensor) -> Result<Vec<Tensor>> {
        let (b, h, w, c) = frames.dims4()?;
        if h < 4 || w < 4 {
            return Err(EdenError::Dimension(format!(
                "edge pyramid needs at least 4x4 frames, got {h}x{w}"
            )));
        }
        let (h2, w2) = (h / 2, w / 2);
        let half = frames
            .narrow(1, 0, 2 * h2)?
            .narrow(2, 0, 2 * w2)?
            .reshape((b, h2, 2, w2, 2, c))?
            .mean(4)?
            .mean(2)?;
        let [dx1, dy1] = Self::edges(frames)?;
        let [dx2, dy2] = Self::edges(&half)?;
        Ok(vec![frames.clone(), dx1, dy1, dx2, dy2])
    }
}

fn check_same(pred: &Tensor, target: &Tensor) -> Result<()> {
    if pred.dims() != target.dims() {
        return Err(EdenError::shape(target.dims(), pred.dims()));
    }
    Ok(())
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Mean absolute difference.
pub fn l1_loss(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same(pred, target)?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Sum over extractor levels of the mean squared feature difference.
pub fn perceptual_loss(
    pred: &Tensor,
    target: &Tensor,
    extractor: &dyn PerceptualExtractor,
) -> Result<Tensor> {
    check_same(pred, target)?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(target)?;
    if fp.len() != ft.len() || fp.is_empty() {
        return Err(EdenError::InvalidArgument(
            "extractor returned mismatched feature lists".into(),
        ));
    }
    let mut total = Tensor::zeros((), pred.dtype(), pred.device())?;
    for (a, b) in fp.iter().zip(&ft) {
        check_same(a, b)?;
        total = (total + (a - b)?.sqr()?.mean_all()?)?;
    }
    Ok(total)
}

/// Mean over tokens and channels of `0.5 (mean^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_penalty(post: &LatentPosterior) -> Result<Tensor> {
    let per = ((post.mean.sqr()? + post.logvar.exp()?)? - 1.0)?;
    Ok(((per - &post.logvar)? * 0.5)?.mean_all()?)
}

/// Hinge losses from discriminator logits: `(generator, discriminator)`.
pub fn hinge_losses(real_logits: &Tensor, fake_logits: &Tensor) -> Result<(Tensor, Tensor)> {
    let disc_real = (1.0 - real_logits)?.relu()?.mean_all()?;
    let disc_fake = (fake_logits + 1.0)?.relu()?.mean_all()?;
    let gen = fake_logits.mean_all()?.neg()?;
    Ok((gen, (disc_real + disc_fake)?))
}

/// Strided convolutional patch discriminator: three stride-2 stages of width
/// 64/128/256 with leaky ReLU, then a 3x3 head producing one logit per patch.
#[derive(Debug)]
pub struct Discriminator {
    store: ParamStore,
    stages: Vec<(Tensor, Tensor)>,
    head: (Tensor, Tensor),
}

impl Discriminator {
    pub const WIDTHS: [usize; 3] = [64, 128, 256];
    pub const MIN_SIDE: usize = 8;
    const SLOPE: f64 = 0.2;

    pub fn new(init_seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::new(dtype);
        let mut rng = seed::rng(init_seed, seed::INIT, &[2]);
        let (stages, head) = {
            let mut b = store.builder(&mut rng);
            let mut stages = Vec::new();
            let mut c_in = 3;
            for (i, &c_out) in Self::WIDTHS.iter().enumerate() {
                stages.push(conv_params(
                    &mut b.sub(format!("stages.{i}")),
                    c_in,
                    c_out,
                    4,
                )?);
                c_in = c_out;
            }
            (stages, conv_params(&mut b.sub("head"), c_in, 1, 3)?)
        };
        Ok(Self {
            store,
            stages,
            head,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// `(batch, h, w, 3)` -> `(batch, h / 8, w / 8)` logits.
    pub fn forward(&self, frames: &Tensor) -> Result<Tensor> {
        let (_, h, w, _) = frames.dims4()?;
        if h < Self::MIN_SIDE || w < Self::MIN_SIDE {
            return Err(EdenError::Dimension(format!(
                "discriminator needs frames of at least {0}x{0}, got {h}x{w}",
                Self::MIN_SIDE
            )));
        }
        let mut x = frames
            .to_dtype(self.store.dtype())?
            .permute((0, 3, 1, 2))?
            .contiguous()?;
        for (weight, bias) in &self.stages {
            x = conv(&x, weight, bias, 2, 1)?;
            x = leaky_relu(&x, Self::SLOPE)?;
        }
        Ok(conv(&x, &self.head.0, &self.head.1, 1, 1)?.squeeze(1)?)
    }

    /// Hinge `(generator, discriminator)` losses for a real/fake pair.
    pub fn adversarial_losses(&self, real: &Tensor, fake: &Tensor) -> Result<(Tensor, Tensor)> {
        check_same(real, fake)?;
        hinge_losses(&self.forward(real)?, &self.forward(fake)?)
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<crate::checkpoint::Checkpoint> {
        Ok(crate::checkpoint::Checkpoint {
            kind: crate::checkpoint::ModelKind::Discriminator,
            config: crate::checkpoint::Checkpoint::snapshot(
                &serde_json::json!({ "widths": Self::WIDTHS }),
                None,
            )?,
            stats: None,
            step,
            params: self.store.export()?,
        })
    }

    pub fn load(&self, ckpt: &crate::checkpoint::Checkpoint) -> Result<()> {
        ckpt.expect_kind(crate::checkpoint::ModelKind::Discriminator)?;
        self.store.import(&ckpt.model_params(), true)
    }
}

fn conv_params(
    b: &mut ParamBuilder,
    c_in: usize,
    c_out: usize,
    k: usize,
) -> Result<(Tensor, Tensor)> {
    let fan_in = (c_in * k * k) as f64;
    Ok((
        b.param(
            "weight",
            &[c_out, c_in, k, k],
            Init::Normal((1.0 / fan_in).sqrt()),
        )?,
        b.param("bias", &[c_out], Init::Zeros)?,
    ))
}

fn conv(
    x: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let y = x.conv2d(weight, padding, stride, 1, 1)?;
    let c = bias.dims()[0];
    Ok(y.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Weighted tokenizer loss and its unweighted components.
#[derive(Debug, Clone)]
pub struct TokenizerLoss {
    pub total: Tensor,
    pub l1: f64,
    pub perceptual: f64,
    pub generator: f64,
    pub kl: f64,
}

/// `l1 * L1 + perceptual * Lp + adversarial * LG + kl * Lkl`. With a zero
/// adversarial weight or no discriminator the adversarial term is skipped
/// entirely, so the result does not depend on the discriminator.
pub fn tokenizer_total_loss(
    pred: &Tensor,
    target: &Tensor,
    post: &LatentPosterior,
    weights: &LossWeights,
    extractor: &dyn PerceptualExtractor,
    disc: Option<&Discriminator>,
) -> Result<TokenizerLoss> {
    let l1 = l1_loss(pred, target)?;
    let lp = perceptual_loss(pred, target, extractor)?;
    let kl = kl_penalty(post)?;
    let mut total = ((&l1 * weights.l1)? + (&lp * weights.perceptual)?)?;
    total = (total + (&kl * weights.kl)?)?;
    let mut generator = 0.0;
    if let Some(d) = disc.filter(|_| weights.adversarial > 0.0) {
        let gen = d
            .forward(pred)?
            .mean_all()?
            .neg()?
            .to_dtype(total.dtype())?;
        generator = scalar(&gen)?;
        total = (total + (gen * weights.adversarial)?)?;
    }
    Ok(TokenizerLoss {
        l1: scalar(&l1)?,
        perceptual: scalar(&lp)?,
        generator,
        kl: scalar(&kl)?,
        total,
    })
}

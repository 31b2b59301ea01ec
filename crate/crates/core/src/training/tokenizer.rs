use candle_core::{DType, Tensor};

use super::optim::{clip_scale, global_grad_norm, AdamW};
use super::{LossRecord, Stage, TrainConfig};
use crate::checkpoint::{Checkpoint, DatasetStats};
use crate::data::{TripletRecord, TripletSource};
use crate::diffusion::standard_normal;
use crate::error::{EdenError, Result};
use crate::frame::{frames_to_tensor, Frame};
use crate::losses::{
    scalar, tokenizer_total_loss, Discriminator, EdgePyramid, PerceptualExtractor,
};
use crate::seed;
use crate::tokenizer::{Tokenizer, TokenizerConfig};

/// Tokenizer plus discriminator with their optimizers. Generator and
/// discriminator alternate one update each per iteration once the
/// adversarial warmup has passed.
pub struct TokenizerTrainer {
    pub tokenizer: Tokenizer,
    pub discriminator: Discriminator,
    opt_g: AdamW,
    opt_d: AdamW,
    cfg: TrainConfig,
    seed: u64,
    step: u64,
    stats: Option<DatasetStats>,
    extractor: Box<dyn PerceptualExtractor>,
}

pub(crate) fn batch_tensors(batch: &[TripletRecord], dtype: DType) -> Result<[Tensor; 3]> {
    let dev = candle_core::Device::Cpu;
    let pick = |f: fn(&TripletRecord) -> &Frame| -> Result<Tensor> {
        let frames: Vec<&Frame> = batch.iter().map(f).collect();
        frames_to_tensor(&frames, dtype, &dev)
    };
    Ok([pick(|r| &r.i0)?, pick(|r| &r.it)?, pick(|r| &r.i1)?])
}

pub(crate) fn optimizer_for(cfg: &TrainConfig) -> AdamW {
    AdamW::new(cfg.betas, cfg.eps, cfg.weight_decay)
}

pub(crate) fn training_snapshot(cfg: &TrainConfig, seed: u64) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(cfg)?;
    v["root_seed"] = serde_json::json!(seed);
    Ok(v)
}

/// Stage recorded in a trainer-written checkpoint.
pub fn checkpoint_stage(ckpt: &Checkpoint) -> Option<Stage> {
    ckpt.training()
        .and_then(|t| t.get("stage"))
        .and_then(|s| serde_json::from_value(s.clone()).ok())
}

impl TokenizerTrainer {
    /// Fresh stage-1 training.
    pub fn new(
        model: TokenizerConfig,
        cfg: TrainConfig,
        seed_root: u64,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate("train")?;
        if cfg.stage != Stage::Stage1 {
            return Err(EdenError::StageOrder(
                "stage-2 training must start from a stage-1 checkpoint".into(),
            ));
        }
        let seed_root = cfg.seed.unwrap_or(seed_root);
        Ok(Self {
            tokenizer: Tokenizer::new(model, seed_root, dtype)?,
            discriminator: Discriminator::new(seed_root, dtype)?,
            opt_g: optimizer_for(&cfg),
            opt_d: optimizer_for(&cfg),
            cfg,
            seed: seed_root,
            step: 0,
            stats: None,
            extractor: Box::new(EdgePyramid),
        })
    }

    /// Stage-2 fine-tuning initialized from stage-1 weights with fresh
    /// optimizers and a new step counter.
    pub fn from_stage1(
        tokenizer: &Checkpoint,
        discriminator: &Checkpoint,
        cfg: TrainConfig,
        seed_root: u64,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate("train")?;
        if cfg.stage != Stage::Stage2 {
            return Err(EdenError::InvalidArgument(
                "from_stage1 expects a stage-2 config".into(),
            ));
        }
        if checkpoint_stage(tokenizer) != Some(Stage::Stage1) {
            return Err(EdenError::StageOrder(
                "stage-2 training needs a checkpoint written by stage-1 training".into(),
            ));
        }
        let seed_root = cfg.seed.unwrap_or(seed_root);
        let disc = Discriminator::new(seed_root, dtype)?;
        disc.load(discriminator)?;
        Ok(Self {
            tokenizer: Tokenizer::from_checkpoint(tokenizer, dtype)?,
            discriminator: disc,
            opt_g: optimizer_for(&cfg),
            opt_d: optimizer_for(&cfg),
            cfg,
            seed: seed_root,
            step: 0,
            stats: tokenizer.stats,
            extractor: Box::new(EdgePyramid),
        })
    }

    /// Continues a run from its own checkpoints: weights, optimizer moments and step.
    pub fn resume(
        tokenizer: &Checkpoint,
        discriminator: &Checkpoint,
        cfg: TrainConfig,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate("train")?;
        let stage = checkpoint_stage(tokenizer).ok_or_else(|| {
            EdenError::Checkpoint("checkpoint was not written by a trainer".into())
        })?;
        if stage != cfg.stage {
            return Err(EdenError::StageOrder(format!(
                "cannot resume a {stage} checkpoint as {}",
                cfg.stage
            )));
        }
        let seed_root = tokenizer
            .training()
            .and_then(|t| t.get("root_seed"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| EdenError::Checkpoint("checkpoint has no root seed".into()))?;
        let tok = Tokenizer::from_checkpoint(tokenizer, dtype)?;
        let disc = Discriminator::new(seed_root, dtype)?;
        disc.load(discriminator)?;
        let mut opt_g = optimizer_for(&cfg);
        opt_g.import(&tokenizer.params, tok.store())?;
        let mut opt_d = optimizer_for(&cfg);
        opt_d.import(&discriminator.params, disc.store())?;
        Ok(Self {
            tokenizer: tok,
            discriminator: disc,
            opt_g,
            opt_d,
            cfg,
            seed: seed_root,
            step: tokenizer.step,
            stats: tokenizer.stats,
            extractor: Box::new(EdgePyramid),
        })
    }

    pub fn with_extractor(mut self, extractor: Box<dyn PerceptualExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn set_stats(&mut self, stats: DatasetStats) {
        self.stats = Some(stats);
    }

    /// One generator update and, past warmup, one discriminator update.
    pub fn train_step(&mut self, batch: &[TripletRecord]) -> Result<LossRecord> {
        let dtype = self.tokenizer.dtype();
        let lr = self.cfg.lr_at(self.step.min(self.cfg.total_steps))?;
        let [i0, it, i1] = batch_tensors(batch, dtype)?;
        let post = self.tokenizer.encode(&i0, &it, &i1)?;
        let mut rng = seed::rng(self.seed, seed::TRAIN, &[self.step, 0]);
        let noise = standard_normal(post.mean.dims(), &mut rng, dtype, &candle_core::Device::Cpu)?;
        let z = post.reparameterize(&noise)?;
        let pred = self.tokenizer.decode_raw(&z, &i0, &i1)?;

        let adversarial =
            self.cfg.loss_weights.adversarial > 0.0 && self.step >= self.cfg.adversarial_start();
        let disc = adversarial.then_some(&self.discriminator);
        let loss = tokenizer_total_loss(
            &pred,
            &it,
            &post,
            &self.cfg.loss_weights,
            self.extractor.as_ref(),
            disc,
        )?;
        let total = scalar(&loss.total)?;
        if !total.is_finite() {
            return Err(EdenError::Data(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        let grads = loss.total.backward()?;
        let norm = global_grad_norm(self.tokenizer.store(), &grads)?;
        self.opt_g.step(
            self.tokenizer.store(),
            &grads,
            lr,
            clip_scale(norm, self.cfg.grad_clip),
        )?;
        drop(grads);

        let mut disc_loss = 0.0;
        if adversarial {
            let (_, d) = self.discriminator.adversarial_losses(&it, &pred.detach())?;
            disc_loss = scalar(&d)?;
            let grads = d.backward()?;
            let norm = global_grad_norm(self.discriminator.store(), &grads)?;
            self.opt_d.step(
                self.discriminator.store(),
                &grads,
                lr,
                clip_scale(norm, self.cfg.grad_clip),
            )?;
        }

        let record = LossRecord {
            step: self.step,
            lr,
            values: vec![
                ("total", total),
                ("l1", loss.l1),
                ("perceptual", loss.perceptual),
                ("adversarial", loss.generator),
                ("kl", loss.kl),
                ("discriminator", disc_loss),
                ("grad_norm", norm),
            ],
        };
        self.step += 1;
        Ok(record)
    }

    /// Trains until `total_steps`, calling `on_checkpoint` every
    /// `checkpoint_every` steps and once at the end.
    pub fn run(
        &mut self,
        source: &dyn TripletSource,
        mut on_record: impl FnMut(&LossRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
        if self.stats.is_none() {
            self.stats = Some(crate::data::compute_dataset_stats(&source.enumerate()?)?);
        }
        while self.step < self.cfg.total_steps {
            let batch = source.batch(self.seed, self.step, self.cfg.batch_size)?;
            let rec = self.train_step(&batch)?;
            on_record(&rec)?;
            if self.step.is_multiple_of(self.cfg.checkpoint_every)
                || self.step == self.cfg.total_steps
            {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// `(tokenizer, discriminator)` checkpoints including optimizer state.
    pub fn checkpoints(&self) -> Result<(Checkpoint, Checkpoint)> {
        let snapshot = training_snapshot(&self.cfg, self.seed)?;
        let mut tok = self.tokenizer.to_checkpoint(self.stats, self.step)?;
        tok.config["training"] = snapshot.clone();
        tok.params.extend(self.opt_g.export()?);
        let mut disc = self.discriminator.to_checkpoint(self.step)?;
        disc.config["training"] = snapshot;
        disc.params.extend(self.opt_d.export()?);
        Ok((tok, disc))
    }
}

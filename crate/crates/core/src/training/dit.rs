use candle_core::{DType, Device, Tensor};
use rand::Rng;

use super::optim::{clip_scale, global_grad_norm, AdamW};
use super::tokenizer::{batch_tensors, checkpoint_stage, optimizer_for, training_snapshot};
use super::{LossRecord, Stage, TrainConfig};
use crate::checkpoint::{Checkpoint, DatasetStats};
use crate::data::{compute_dataset_stats, TripletRecord, TripletSource};
use crate::diffusion::{
    difference_context, flow_loss, forward_sample_batch, standard_normal, DiTConfig, Dit,
};
use crate::error::{EdenError, Result};
use crate::losses::scalar;
use crate::seed;
use crate::tokenizer::Tokenizer;

/// Most triplets used by the latent statistics pass.
const LATENT_STATS_SAMPLES: usize = 256;

/// Population standard deviation of sampled encoder latents over (a strided
/// subset of) `triplets`, encoded one at a time.
pub fn latent_std_pass(
    tokenizer: &Tokenizer,
    triplets: &[TripletRecord],
    seed_root: u64,
) -> Result<f64> {
    if triplets.is_empty() {
        return Err(EdenError::NoSamples(
            "latent statistics need at least one triplet".into(),
        ));
    }
    let stride = triplets.len().div_ceil(LATENT_STATS_SAMPLES);
    let (mut sum, mut sum_sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for (i, rec) in triplets.iter().step_by(stride).enumerate() {
        let post = tokenizer.encode_frames(&rec.i0, &rec.it, &rec.i1)?;
        let mut rng = seed::rng(seed_root, seed::TRAIN, &[u64::MAX, i as u64]);
        let noise = standard_normal(post.mean.dims(), &mut rng, tokenizer.dtype(), &Device::Cpu)?;
        let z: Vec<f64> = post
            .reparameterize(&noise)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        sum += z.iter().sum::<f64>();
        sum_sq += z.iter().map(|v| v * v).sum::<f64>();
        n += z.len();
    }
    let mean = sum / n as f64;
    let var = (sum_sq / n as f64 - mean * mean).max(0.0);
    Ok(var.sqrt().max(DatasetStats::MIN_STD))
}

/// Diffusion model trained on latents of a frozen tokenizer.
pub struct DitTrainer {
    pub dit: Dit,
    tokenizer: Tokenizer,
    opt: AdamW,
    cfg: TrainConfig,
    seed: u64,
    step: u64,
    stats: DatasetStats,
}

impl DitTrainer {
    /// Fresh stage-1 training. Similarity statistics come from `source`, the
    /// latent scale from an encoder pass over it.
    pub fn new(
        model: DiTConfig,
        tokenizer: &Checkpoint,
        source: &dyn TripletSource,
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
        let tok = Tokenizer::from_checkpoint(tokenizer, dtype)?;
        model.check_compatible(tok.config())?;
        let seed_root = cfg.seed.unwrap_or(seed_root);
        let triplets = source.enumerate()?;
        let mut stats = compute_dataset_stats(&triplets)?;
        stats.latent_std = Some(latent_std_pass(&tok, &triplets, seed_root)?);
        Ok(Self {
            dit: Dit::new(model, seed_root, dtype)?,
            tokenizer: tok,
            opt: optimizer_for(&cfg),
            cfg,
            seed: seed_root,
            step: 0,
            stats,
        })
    }

    /// Stage-2 fine-tuning from a stage-1 checkpoint, keeping its statistics.
    pub fn from_stage1(
        dit: &Checkpoint,
        tokenizer: &Checkpoint,
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
        if checkpoint_stage(dit) != Some(Stage::Stage1) {
            return Err(EdenError::StageOrder(
                "stage-2 training needs a checkpoint written by stage-1 training".into(),
            ));
        }
        let seed_root = cfg.seed.unwrap_or(seed_root);
        Self::restore(dit, tokenizer, cfg, seed_root, dtype, false)
    }

    /// Continues a run from its own checkpoint, including optimizer state and step.
    pub fn resume(
        dit: &Checkpoint,
        tokenizer: &Checkpoint,
        cfg: TrainConfig,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate("train")?;
        let stage = checkpoint_stage(dit).ok_or_else(|| {
            EdenError::Checkpoint("checkpoint was not written by a trainer".into())
        })?;
        if stage != cfg.stage {
            return Err(EdenError::StageOrder(format!(
                "cannot resume a {stage} checkpoint as {}",
                cfg.stage
            )));
        }
        let seed_root = dit
            .training()
            .and_then(|t| t.get("root_seed"))
            .and_then(|s| s.as_u64())
            .ok_or_else(|| EdenError::Checkpoint("checkpoint has no root seed".into()))?;
        Self::restore(dit, tokenizer, cfg, seed_root, dtype, true)
    }

    fn restore(
        dit: &Checkpoint,
        tokenizer: &Checkpoint,
        cfg: TrainConfig,
        seed_root: u64,
        dtype: DType,
        with_state: bool,
    ) -> Result<Self> {
        let tok = Tokenizer::from_checkpoint(tokenizer, dtype)?;
        let model = Dit::from_checkpoint(dit, dtype)?;
        model.config().check_compatible(tok.config())?;
        let stats = dit.stats.ok_or_else(|| {
            EdenError::MissingStats("diffusion checkpoint carries no statistics".into())
        })?;
        stats.latent_std()?;
        let mut opt = optimizer_for(&cfg);
        if with_state {
            opt.import(&dit.params, model.store())?;
        }
        Ok(Self {
            dit: model,
            tokenizer: tok,
            opt,
            cfg,
            seed: seed_root,
            step: if with_state { dit.step } else { 0 },
            stats,
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn stats(&self) -> &DatasetStats {
        &self.stats
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    /// Standardized posterior samples of the intermediate frames.
    fn target_latents(&self, i0: &Tensor, it: &Tensor, i1: &Tensor) -> Result<Tensor> {
        let post = self.tokenizer.encode(i0, it, i1)?;
        let mut rng = seed::rng(self.seed, seed::TRAIN, &[self.step, 0]);
        let noise = standard_normal(post.mean.dims(), &mut rng, self.dit.dtype(), &Device::Cpu)?;
        Ok((post.reparameterize(&noise)?.detach() / self.stats.latent_std()?)?)
    }

    /// Mean flow loss of the current model on `batch` at the current step's
    /// noise and times, with the difference contexts taken from `diffs`
    /// (computed from the batch when `None`). No update is applied.
    pub fn evaluate_loss(&self, batch: &[TripletRecord], diffs: Option<&[f64]>) -> Result<f64> {
        let (loss, _) = self.loss(batch, diffs)?;
        scalar(&loss)
    }

    pub fn difference_contexts(&self, batch: &[TripletRecord]) -> Result<Vec<f64>> {
        batch
            .iter()
            .map(|r| difference_context(&r.i0, &r.i1, &self.stats))
            .collect()
    }

    fn loss(&self, batch: &[TripletRecord], diffs: Option<&[f64]>) -> Result<(Tensor, Vec<f64>)> {
        let dtype = self.dit.dtype();
        let [i0, it, i1] = batch_tensors(batch, dtype)?;
        let x0 = self.target_latents(&i0, &it, &i1)?;
        let mut rng = seed::rng(self.seed, seed::TRAIN, &[self.step, 1]);
        let eps = standard_normal(x0.dims(), &mut rng, dtype, &Device::Cpu)?;
        let mut rng = seed::rng(self.seed, seed::TRAIN, &[self.step, 2]);
        let t: Vec<f64> = (0..batch.len())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        let diffs = match diffs {
            Some(d) => d.to_vec(),
            None => self.difference_contexts(batch)?,
        };
        let ctx = self.dit.prepare_context(&i0, &i1, &diffs)?;
        let x_t = forward_sample_batch(&x0, &eps, &t)?;
        let v = self.dit.velocity(&x_t, &t, &ctx)?;
        Ok((flow_loss(&v, &x0, &eps)?, t))
    }

    pub fn train_step(&mut self, batch: &[TripletRecord]) -> Result<LossRecord> {
        let lr = self.cfg.lr_at(self.step.min(self.cfg.total_steps))?;
        let (loss, _) = self.loss(batch, None)?;
        let value = scalar(&loss)?;
        if !value.is_finite() {
            return Err(EdenError::Data(format!(
                "non-finite loss at step {}",
                self.step
            )));
        }
        let grads = loss.backward()?;
        let norm = global_grad_norm(self.dit.store(), &grads)?;
        self.opt.step(
            self.dit.store(),
            &grads,
            lr,
            clip_scale(norm, self.cfg.grad_clip),
        )?;
        let rec = LossRecord {
            step: self.step,
            lr,
            values: vec![("flow", value), ("grad_norm", norm)],
        };
        self.step += 1;
        Ok(rec)
    }

    pub fn run(
        &mut self,
        source: &dyn TripletSource,
        mut on_record: impl FnMut(&LossRecord) -> Result<()>,
        mut on_checkpoint: impl FnMut(&Self) -> Result<()>,
    ) -> Result<()> {
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

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = self.dit.to_checkpoint(Some(self.stats), self.step)?;
        ckpt.config["training"] = training_snapshot(&self.cfg, self.seed)?;
        ckpt.params.extend(self.opt.export()?);
        Ok(ckpt)
    }
}

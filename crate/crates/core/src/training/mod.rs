//! Two-stage training of the tokenizer and the diffusion model.

mod dit;
mod optim;
mod tokenizer;

pub use dit::{latent_std_pass, DitTrainer};
pub use optim::{clip_scale, global_grad_norm, AdamW};
pub use tokenizer::TokenizerTrainer;

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{EdenError, Result};
use crate::losses::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Fixed resolution, short intervals.
    Stage1,
    /// Multi-resolution, multi-interval fine-tuning from a stage-1 checkpoint.
    Stage2,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::Stage1),
            2 => Ok(Stage::Stage2),
            _ => Err(EdenError::InvalidArgument(format!(
                "stage must be 1 or 2, got {n}"
            ))),
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage{}", self.number())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_min: f64,
    pub total_steps: u64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm bound; `0` disables clipping.
    pub grad_clip: f64,
    pub intervals: Vec<usize>,
    /// `[height, width]` crops drawn per batch.
    pub resolutions: Vec<[usize; 2]>,
    pub checkpoint_every: u64,
    /// Fraction of `total_steps` before the adversarial term and the
    /// discriminator updates switch on (tokenizer only).
    pub adversarial_warmup: f64,
    pub loss_weights: LossWeights,
    /// Reserved; weight averaging is not implemented and must stay off.
    pub ema: bool,
    /// Overrides the run's root seed.
    pub seed: Option<u64>,
}

impl TrainConfig {
    pub fn defaults(stage: Stage) -> Self {
        match stage {
            Stage::Stage1 => Self {
                stage,
                batch_size: 256,
                lr_start: 1.0e-4,
                lr_min: 1.0e-8,
                total_steps: 200_000,
                betas: [0.9, 0.99],
                eps: 1e-8,
                weight_decay: 1e-4,
                grad_clip: 1.0,
                intervals: (1..=5).collect(),
                resolutions: vec![[64, 64]],
                checkpoint_every: 500,
                adversarial_warmup: 0.5,
                loss_weights: LossWeights::default(),
                ema: false,
                seed: None,
            },
            Stage::Stage2 => Self {
                stage,
                batch_size: 64,
                lr_start: 1.0e-5,
                lr_min: 1.25e-8,
                total_steps: 50_000,
                intervals: (1..=10).collect(),
                resolutions: vec![[64, 64], [64, 128], [128, 128]],
                adversarial_warmup: 0.0,
                ..Self::defaults(Stage::Stage1)
            },
        }
    }

    /// `prefix` is the config path of this section, used in error messages.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(EdenError::Config {
                path: format!("{prefix}.{field}"),
                message: message.to_string(),
            })
        };
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.lr_min.is_nan() || self.lr_min <= 0.0 {
            return bad("lr_min", "must be positive");
        }
        if self.lr_start.is_nan() || self.lr_start < self.lr_min {
            return bad("lr_start", "must be at least lr_min");
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return bad("betas", "each beta must lie in [0, 1)");
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return bad(
                "eps",
                "eps must be positive; weight_decay and grad_clip non-negative",
            );
        }
        if self.intervals.is_empty() || self.intervals.contains(&0) {
            return bad(
                "intervals",
                "must be a non-empty list of positive intervals",
            );
        }
        if self.resolutions.is_empty() || self.resolutions.iter().any(|r| r[0] == 0 || r[1] == 0) {
            return bad("resolutions", "must be a non-empty list of positive sizes");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every", "must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.adversarial_warmup) {
            return bad("adversarial_warmup", "must be a fraction in [0, 1]");
        }
        if self.ema {
            return bad("ema", "weight averaging is not supported");
        }
        self.loss_weights.validate().map_err(|e| match e {
            EdenError::Config { path, message } => EdenError::Config {
                path: format!("{prefix}.{path}"),
                message,
            },
            other => other,
        })
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        cosine_lr(step, self.total_steps, self.lr_start, self.lr_min)
    }

    /// First step at which the adversarial term is active.
    pub fn adversarial_start(&self) -> u64 {
        (self.adversarial_warmup * self.total_steps as f64).ceil() as u64
    }

    pub fn resolution_pairs(&self) -> Vec<(usize, usize)> {
        self.resolutions.iter().map(|r| (r[0], r[1])).collect()
    }
}

/// Cosine annealing from `lr_start` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: u64, total: u64, lr_start: f64, lr_min: f64) -> Result<f64> {
    if step > total {
        return Err(EdenError::InvalidArgument(format!(
            "step {step} is past the end of a {total}-step schedule"
        )));
    }
    if total == 0 {
        return Ok(lr_start);
    }
    let phase = PI * step as f64 / total as f64;
    Ok(lr_min + 0.5 * (lr_start - lr_min) * (1.0 + phase.cos()))
}

/// One row of a loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub values: Vec<(&'static str, f64)>,
}

impl LossRecord {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.values
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
    }
}

/// Appends records to a CSV loss log (`step,lr,<components>`), writing the
/// header when the file is new.
pub fn append_loss_log(path: &Path, records: &[LossRecord]) -> Result<()> {
    let Some(first) = records.first() else {
        return Ok(());
    };
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if fresh {
        let mut header = vec!["step".to_string(), "lr".to_string()];
        header.extend(first.values.iter().map(|(k, _)| k.to_string()));
        w.write_record(&header)?;
    }
    for r in records {
        let mut row = vec![r.step.to_string(), format!("{:e}", r.lr)];
        row.extend(r.values.iter().map(|(_, v)| format!("{v:e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

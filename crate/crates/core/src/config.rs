//! JSON run configuration.
//!
//! Every section is optional and falls back to defaults. Training sections
//! are filled per stage, so a partial `train.tokenizer.stage2` object keeps
//! the stage-2 defaults for the keys it omits. Unknown keys are rejected and
//! errors carry the dotted path of the offending key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ingest_frame_dir, synth_sequence_indexed, SequenceSampler, SpriteSceneConfig};
use crate::diffusion::DiTConfig;
use crate::error::{EdenError, Result};
use crate::evaluation::{DEFAULT_SWEEP_INTERVALS, DEFAULT_SWEEP_STEPS};
use crate::frame::Frame;
use crate::tokenizer::TokenizerConfig;
use crate::training::{Stage, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub scene: SpriteSceneConfig,
    pub num_sequences: usize,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self {
            scene: SpriteSceneConfig::default(),
            num_sequences: 8,
        }
    }
}

/// Exactly one of `synthetic` or `frame_dirs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub synthetic: Option<SyntheticData>,
    /// Directories of `frame_000000.png`-style sequences; relative paths are
    /// resolved against the config file.
    #[serde(default)]
    pub frame_dirs: Vec<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: Some(SyntheticData::default()),
            frame_dirs: Vec::new(),
        }
    }
}

impl DataConfig {
    /// Named sequences, generated or loaded.
    pub fn load_sequences(&self) -> Result<Vec<(String, Vec<Frame>)>> {
        match &self.synthetic {
            Some(s) => (0..s.num_sequences)
                .map(|i| {
                    Ok((
                        sequence_name(i),
                        synth_sequence_indexed(&s.scene, i as u64)?,
                    ))
                })
                .collect(),
            None => self
                .frame_dirs
                .iter()
                .map(|d| Ok((d.display().to_string(), ingest_frame_dir(d)?)))
                .collect(),
        }
    }
}

pub fn sequence_name(index: usize) -> String {
    format!("seq_{index:04}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Axis of the denoising-step sweep.
    pub steps: Vec<usize>,
    /// Axis of the interval sweep.
    pub intervals: Vec<usize>,
    /// Steps used by `eval` and the interval sweep.
    pub denoise_steps: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_SWEEP_STEPS.to_vec(),
            intervals: DEFAULT_SWEEP_INTERVALS.to_vec(),
            denoise_steps: crate::diffusion::DEFAULT_STEPS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StagePair {
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
}

impl StagePair {
    pub fn get(&self, stage: Stage) -> &TrainConfig {
        match stage {
            Stage::Stage1 => &self.stage1,
            Stage::Stage2 => &self.stage2,
        }
    }
}

impl Default for StagePair {
    fn default() -> Self {
        Self {
            stage1: TrainConfig::defaults(Stage::Stage1),
            stage2: TrainConfig::defaults(Stage::Stage2),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainSections {
    pub tokenizer: StagePair,
    pub dit: StagePair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub dit: DiTConfig,
    pub train: TrainSections,
    pub eval: EvalConfig,
}

type JsonMap = serde_json::Map<String, serde_json::Value>;

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawStages {
    #[serde(default)]
    stage1: Option<JsonMap>,
    #[serde(default)]
    stage2: Option<JsonMap>,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawTrain {
    #[serde(default)]
    tokenizer: RawStages,
    #[serde(default)]
    dit: RawStages,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRunConfig {
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    data: DataConfig,
    #[serde(default)]
    tokenizer: TokenizerConfig,
    #[serde(default)]
    dit: DiTConfig,
    #[serde(default)]
    train: RawTrain,
    #[serde(default)]
    eval: EvalConfig,
}

fn path_error<E: std::fmt::Display>(prefix: &str, err: serde_path_to_error::Error<E>) -> EdenError {
    let inner = err.path().to_string();
    let path = match (prefix.is_empty(), inner.as_str()) {
        (true, _) => inner.clone(),
        (false, ".") => prefix.to_string(),
        (false, _) => format!("{prefix}.{inner}"),
    };
    EdenError::Config {
        path,
        message: err.inner().to_string(),
    }
}

fn stage_config(stage: Stage, overrides: Option<JsonMap>, prefix: &str) -> Result<TrainConfig> {
    let serde_json::Value::Object(mut merged) = serde_json::to_value(TrainConfig::defaults(stage))?
    else {
        unreachable!("a struct serializes to an object");
    };
    for (k, v) in overrides.unwrap_or_default() {
        merged.insert(k, v);
    }
    let cfg: TrainConfig = serde_path_to_error::deserialize(serde_json::Value::Object(merged))
        .map_err(|e| path_error(prefix, e))?;
    if cfg.stage != stage {
        return Err(EdenError::Config {
            path: format!("{prefix}.stage"),
            message: format!("section is for {stage} but says {}", cfg.stage),
        });
    }
    Ok(cfg)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let raw: RawRunConfig =
            serde_path_to_error::deserialize(de).map_err(|e| path_error("", e))?;
        let stages = |s: RawStages, name: &str| -> Result<StagePair> {
            Ok(StagePair {
                stage1: stage_config(Stage::Stage1, s.stage1, &format!("train.{name}.stage1"))?,
                stage2: stage_config(Stage::Stage2, s.stage2, &format!("train.{name}.stage2"))?,
            })
        };
        let cfg = Self {
            seed: raw.seed,
            output_dir: raw.output_dir,
            data: raw.data,
            tokenizer: raw.tokenizer,
            dit: raw.dit,
            train: TrainSections {
                tokenizer: stages(raw.train.tokenizer, "tokenizer")?,
                dit: stages(raw.train.dit, "dit")?,
            },
            eval: raw.eval,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for d in &mut cfg.data.frame_dirs {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |path: String, message: String| Err(EdenError::Config { path, message });
        self.tokenizer.validate()?;
        self.dit.validate()?;
        if self.dit.latent_dim != self.tokenizer.latent_dim {
            return cfg_err(
                "dit.latent_dim".into(),
                "must equal tokenizer.latent_dim".into(),
            );
        }
        if self.dit.patch_size != self.tokenizer.patch_size {
            return cfg_err(
                "dit.patch_size".into(),
                "must equal tokenizer.patch_size".into(),
            );
        }

        let canvas = match (&self.data.synthetic, self.data.frame_dirs.is_empty()) {
            (Some(_), false) | (None, true) => {
                return cfg_err(
                    "data".into(),
                    "exactly one of `synthetic` or `frame_dirs` must be given".into(),
                )
            }
            (Some(s), true) => {
                s.scene.validate("data.synthetic.scene")?;
                if s.num_sequences == 0 {
                    return cfg_err(
                        "data.synthetic.num_sequences".into(),
                        "must be at least 1".into(),
                    );
                }
                Some((s.scene.height, s.scene.width, s.scene.max_interval))
            }
            (None, false) => None,
        };

        let multiple = self.tokenizer.block_size();
        for (model, pair) in [
            ("tokenizer", &self.train.tokenizer),
            ("dit", &self.train.dit),
        ] {
            for stage in [Stage::Stage1, Stage::Stage2] {
                let prefix = format!("train.{model}.{stage}");
                let tc = pair.get(stage);
                tc.validate(&prefix)?;
                for &[h, w] in &tc.resolutions {
                    if h % multiple != 0 || w % multiple != 0 {
                        return cfg_err(
                            format!("{prefix}.resolutions"),
                            format!("{h}x{w} is not divisible by 2 x patch size = {multiple}"),
                        );
                    }
                    if let Some((ch, cw, _)) = canvas {
                        if h > ch || w > cw {
                            return cfg_err(
                                format!("{prefix}.resolutions"),
                                format!("{h}x{w} does not fit the {ch}x{cw} canvas"),
                            );
                        }
                    }
                }
                if let Some((_, _, k_max)) = canvas {
                    if let Some(&k) = tc.intervals.iter().find(|&&k| k > k_max) {
                        return cfg_err(
                            format!("{prefix}.intervals"),
                            format!(
                                "interval {k} exceeds data.synthetic.scene.max_interval = {k_max}"
                            ),
                        );
                    }
                }
            }
        }
        if self.eval.steps.is_empty() {
            return cfg_err("eval.steps".into(), "must not be empty".into());
        }
        if self.eval.intervals.is_empty() || self.eval.intervals.contains(&0) {
            return cfg_err(
                "eval.intervals".into(),
                "must be a non-empty list of positive intervals".into(),
            );
        }
        if let Some((_, _, k_max)) = canvas {
            if let Some(&k) = self.eval.intervals.iter().find(|&&k| k > k_max) {
                return cfg_err(
                    "eval.intervals".into(),
                    format!("interval {k} exceeds data.synthetic.scene.max_interval = {k_max}"),
                );
            }
        }
        Ok(())
    }

    /// Batch sampler over the configured data for one training section.
    pub fn sampler(&self, train: &TrainConfig) -> Result<SequenceSampler> {
        SequenceSampler::new(
            self.data.load_sequences()?,
            train.intervals.clone(),
            train.resolution_pairs(),
            self.tokenizer.block_size(),
        )
    }
}

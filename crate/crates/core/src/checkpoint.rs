//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "EDENCKPT"                      8 bytes magic
//! version                         u32
//! metadata length                 u32
//! metadata                        UTF-8 JSON {kind, config, stats, step}
//! repeated until EOF:
//!   name length                   u32
//!   name                          UTF-8
//!   rank                          u32
//!   dims                          u32 x rank
//!   payload                       f32 x prod(dims), row-major
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{EdenError, Result};

pub const MAGIC: &[u8; 8] = b"EDENCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Prefix reserved for optimizer state stored alongside model parameters.
pub const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl ParamArray {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(EdenError::shape(dims.iter().product::<usize>(), data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self {
            dims: t.dims().to_vec(),
            data: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.dims.as_slice(), device)?.to_dtype(dtype)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tokenizer,
    Dit,
    Discriminator,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Tokenizer => "tokenizer",
            ModelKind::Dit => "dit",
            ModelKind::Discriminator => "discriminator",
        };
        f.write_str(s)
    }
}

/// Normalization statistics of a training corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetStats {
    /// Mean cosine similarity of start/end frame pairs.
    pub sim_mean: f64,
    /// Population standard deviation of the same, clamped to at least `1e-6`.
    pub sim_std: f64,
    /// Global standard deviation of encoder latents; absent until an encoder pass has run.
    pub latent_std: Option<f64>,
}

impl DatasetStats {
    pub const MIN_STD: f64 = 1e-6;

    pub fn new(sim_mean: f64, sim_std: f64) -> Self {
        Self {
            sim_mean,
            sim_std: sim_std.max(Self::MIN_STD),
            latent_std: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sim_mean.is_finite() || !(self.sim_std.is_finite() && self.sim_std > 0.0) {
            return Err(EdenError::MissingStats(format!(
                "invalid similarity statistics {self:?}"
            )));
        }
        if let Some(s) = self.latent_std {
            if !s.is_finite() || s <= 0.0 {
                return Err(EdenError::MissingStats(format!("invalid latent_std {s}")));
            }
        }
        Ok(())
    }

    pub fn latent_std(&self) -> Result<f64> {
        self.latent_std
            .ok_or_else(|| EdenError::MissingStats("latent_std has not been computed".into()))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct Metadata {
    kind: ModelKind,
    config: serde_json::Value,
    stats: Option<DatasetStats>,
    step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: serde_json::Value,
    pub stats: Option<DatasetStats>,
    pub step: u64,
    pub params: BTreeMap<String, ParamArray>,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(EdenError::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Config snapshot layout: `{"model": <model config>, "training": <train config or null>}`.
    pub fn snapshot<M: Serialize>(
        model: &M,
        training: Option<serde_json::Value>,
    ) -> Result<serde_json::Value> {
        Ok(serde_json::json!({
            "model": serde_json::to_value(model)?,
            "training": training.unwrap_or(serde_json::Value::Null),
        }))
    }

    pub fn model_config<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        let model = self.config.get("model").ok_or_else(|| {
            EdenError::Checkpoint(format!("{} checkpoint has no model config", self.kind))
        })?;
        let de = model.clone();
        serde_path_to_error::deserialize(de).map_err(|e| EdenError::Config {
            path: format!("checkpoint.model.{}", e.path()),
            message: e.inner().to_string(),
        })
    }

    /// The training section of the snapshot, if the checkpoint came from a trainer.
    pub fn training(&self) -> Option<&serde_json::Value> {
        self.config.get("training").filter(|v| !v.is_null())
    }

    /// Model parameters without optimizer state.
    pub fn model_params(&self) -> BTreeMap<String, ParamArray> {
        self.params
            .iter()
            .filter(|(k, _)| !k.starts_with(OPTIM_PREFIX))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Metadata {
            kind: self.kind,
            config: self.config.clone(),
            stats: self.stats,
            step: self.step,
        })?;
        let payload: usize = self.params.values().map(|p| p.data.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + meta.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        for (name, arr) in &self.params {
            out.extend_from_slice(&u32_len(name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&u32_len(arr.dims.len())?.to_le_bytes());
            for &d in &arr.dims {
                out.extend_from_slice(&u32_len(d)?.to_le_bytes());
            }
            for v in &arr.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(EdenError::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r, "version")?;
        if version != FORMAT_VERSION {
            return Err(EdenError::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let meta_len = read_u32(&mut r, "metadata length")? as usize;
        let mut meta = vec![0u8; meta_len];
        read_exact(&mut r, &mut meta, "metadata")?;
        let meta: Metadata = serde_json::from_slice(&meta)?;

        let mut params = BTreeMap::new();
        while !r.is_empty() {
            let name_len = read_u32(&mut r, "name length")? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name)
                .map_err(|_| EdenError::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r, "rank")? as usize;
            let dims = (0..rank)
                .map(|_| read_u32(&mut r, "dims").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            if r.len() < count * 4 {
                return Err(EdenError::Checkpoint(format!(
                    "truncated payload for `{name}`"
                )));
            }
            let (payload, rest) = r.split_at(count * 4);
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = rest;
            if params
                .insert(name.clone(), ParamArray { dims, data })
                .is_some()
            {
                return Err(EdenError::Checkpoint(format!(
                    "duplicate parameter `{name}`"
                )));
            }
        }
        Ok(Self {
            kind: meta.kind,
            config: meta.config,
            stats: meta.stats,
            step: meta.step,
            params,
        })
    }
}

/// Writes to a sibling temp file then renames, so readers never see a partial file.
pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&ckpt.to_bytes()?)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| EdenError::Checkpoint(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    Checkpoint::from_bytes(&bytes)
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| EdenError::Checkpoint(format!("length {n} exceeds u32")))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| EdenError::Checkpoint(format!("truncated file while reading {what}")))
}

fn read_u32(r: &mut &[u8], what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

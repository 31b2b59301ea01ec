//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::checkpoint::{ParamArray, OPTIM_PREFIX};
use crate::error::{EdenError, Result};
use crate::nn::ParamStore;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(betas: [f64; 2], eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1: betas[0],
            beta2: betas[1],
            eps,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every parameter that received a gradient. Gradients are
    /// multiplied by `grad_scale` first (used for clipping).
    pub fn step(
        &mut self,
        store: &ParamStore,
        grads: &GradStore,
        lr: f64,
        grad_scale: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = (g.detach() * grad_scale)?;
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let g2 = g.sqr()?;
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (&g2 * (1.0 - self.beta2))?)?,
                None => (&g2 * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            let decayed = (var.as_tensor().detach() * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m.detach());
            self.v.insert(name.clone(), v.detach());
        }
        Ok(())
    }

    /// Moments as `optim.m.<param>` / `optim.v.<param>` plus the step count `optim.t`.
    pub fn export(&self) -> Result<BTreeMap<String, ParamArray>> {
        let mut out = BTreeMap::new();
        for (name, m) in &self.m {
            out.insert(
                format!("{OPTIM_PREFIX}m.{name}"),
                ParamArray::from_tensor(m)?,
            );
        }
        for (name, v) in &self.v {
            out.insert(
                format!("{OPTIM_PREFIX}v.{name}"),
                ParamArray::from_tensor(v)?,
            );
        }
        // f32 holds integers exactly up to 2^24, far beyond any run length here
        out.insert(
            format!("{OPTIM_PREFIX}t"),
            ParamArray::new(vec![1], vec![self.t as f32])?,
        );
        Ok(out)
    }

    /// Restores state written by [`AdamW::export`]; moments for unknown
    /// parameters are rejected.
    pub fn import(
        &mut self,
        params: &BTreeMap<String, ParamArray>,
        store: &ParamStore,
    ) -> Result<()> {
        self.m.clear();
        self.v.clear();
        self.t = 0;
        for (key, arr) in params {
            let Some(rest) = key.strip_prefix(OPTIM_PREFIX) else {
                continue;
            };
            if rest == "t" {
                self.t = arr.data.first().copied().unwrap_or(0.0) as u64;
                continue;
            }
            let (slot, name) = rest
                .split_once('.')
                .ok_or_else(|| EdenError::Checkpoint(format!("malformed optimizer entry {key}")))?;
            let var = store.get(name).ok_or_else(|| {
                EdenError::Checkpoint(format!("optimizer state for unknown parameter {name}"))
            })?;
            if var.dims() != arr.dims.as_slice() {
                return Err(EdenError::Checkpoint(format!(
                    "optimizer state {key} has shape {:?}, parameter is {:?}",
                    arr.dims,
                    var.dims()
                )));
            }
            let t = arr.to_tensor(store.dtype(), store.device())?;
            match slot {
                "m" => self.m.insert(name.to_string(), t),
                "v" => self.v.insert(name.to_string(), t),
                _ => {
                    return Err(EdenError::Checkpoint(format!(
                        "unknown optimizer slot in {key}"
                    )))
                }
            };
        }
        Ok(())
    }
}

/// L2 norm over all gradients of the parameters in `store`.
pub fn global_grad_norm(store: &ParamStore, grads: &GradStore) -> Result<f64> {
    let mut sum = 0.0;
    for var in store.vars().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            sum += g
                .sqr()?
                .sum_all()?
                .to_dtype(candle_core::DType::F64)?
                .to_scalar::<f64>()?;
        }
    }
    Ok(sum.sqrt())
}

/// Scale factor that brings the gradient norm down to `max_norm` (1 when
/// already within bounds or when clipping is disabled with `max_norm <= 0`).
pub fn clip_scale(norm: f64, max_norm: f64) -> f64 {
    if max_norm > 0.0 && norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

//! Timestep and start/end difference conditioning.

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::DatasetStats;
use crate::error::{EdenError, Result};
use crate::frame::Frame;
use crate::nn::{Mlp, ParamBuilder};

pub const MAX_PERIOD: f64 = 1.0e4;

/// Frequencies log-spaced over `[1, MAX_PERIOD]`.
fn frequencies(half: usize) -> Vec<f64> {
    (0..half)
        .map(|i| {
            if half == 1 {
                1.0
            } else {
                MAX_PERIOD.powf(i as f64 / (half - 1) as f64)
            }
        })
        .collect()
}

/// Sinusoidal features `[sin(t f_0) .. sin(t f_{k-1}), cos(t f_0) .. cos(t f_{k-1})]`
/// with `k = dim / 2`; an odd `dim` gets one trailing zero.
pub fn timestep_features(t: &[f64], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    if let Some(bad) = t.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EdenError::InvalidArgument(format!(
            "timestep {bad} outside [0, 1]"
        )));
    }
    let freqs = frequencies(dim / 2);
    let mut out = Vec::with_capacity(t.len() * dim);
    for &tv in t {
        out.extend(freqs.iter().map(|f| (tv * f).sin()));
        out.extend(freqs.iter().map(|f| (tv * f).cos()));
        if dim % 2 == 1 {
            out.push(0.0);
        }
    }
    Ok(Tensor::from_vec(out, (t.len(), dim), device)?.to_dtype(dtype)?)
}

/// Sinusoidal features followed by a two-layer SiLU MLP.
#[derive(Debug, Clone)]
pub struct TimestepEmbedder {
    mlp: Mlp,
    dim: usize,
}

impl TimestepEmbedder {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(&mut b.sub("mlp"), dim, dim, dim)?,
            dim,
        })
    }

    pub fn forward(&self, t: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        self.mlp
            .forward_silu(&timestep_features(t, self.dim, dtype, device)?)
    }
}

pub fn cosine_similarity(a: &Frame, b: &Frame) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(EdenError::shape(a.dims(), b.dims()));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.pixels().iter().zip(b.pixels()) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EdenError::InvalidArgument(
            "cosine similarity of an all-zero frame is undefined".into(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Standardized cosine similarity of the flattened start and end frames.
pub fn difference_context(i0: &Frame, i1: &Frame, stats: &DatasetStats) -> Result<f64> {
    stats.validate()?;
    Ok((cosine_similarity(i0, i1)? - stats.sim_mean) / stats.sim_std)
}

/// Scalar difference context -> `dim` vector. The output layer starts at zero,
/// so at initialization conditioning is timestep-only.
#[derive(Debug, Clone)]
pub struct DifferenceEmbedder {
    mlp: Mlp,
}

impl DifferenceEmbedder {
    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::zero_out(&mut b.sub("mlp"), 1, dim, dim)?,
        })
    }

    pub fn forward(&self, ctx: &[f64], dtype: DType, device: &Device) -> Result<Tensor> {
        if let Some(bad) = ctx.iter().find(|v| !v.is_finite()) {
            return Err(EdenError::InvalidArgument(format!(
                "difference context {bad} is not finite"
            )));
        }
        let x = Tensor::from_slice(ctx, (ctx.len(), 1), device)?.to_dtype(dtype)?;
        self.mlp.forward_silu(&x)
    }
}

//! Minimal differentiable building blocks over candle tensors.
//!
//! Everything here is composed from primitive tensor ops so reverse-mode
//! gradients exist for every parameter (the fused candle softmax and layer-norm
//! kernels have no backward pass).

use std::collections::BTreeMap;
use std::fmt::Display;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::checkpoint::ParamArray;
use crate::error::{EdenError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    Normal(f64),
    /// Xavier/Glorot uniform for a `(fan_in, fan_out)` weight.
    Xavier,
}

/// Named parameters of one model. Names are dotted paths such as
/// `encoder.blocks.0.fusion.attn.q.weight`.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn flat_values(&self, name: &str) -> Result<Vec<f64>> {
        let var = self.lookup(name)?;
        Ok(var
            .as_tensor()
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?)
    }

    pub fn set_flat(&self, name: &str, values: &[f64]) -> Result<()> {
        let var = self.lookup(name)?;
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Overwrites every parameter whose name satisfies `pred` with `value`.
    pub fn fill_where(&self, pred: impl Fn(&str) -> bool, value: f64) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if pred(name) {
                let t = (var.as_tensor().zeros_like()? + value)?;
                var.set(&t)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Re-draws every parameter whose name satisfies `pred` from `N(0, std^2)`.
    pub fn randomize_where(
        &self,
        pred: impl Fn(&str) -> bool,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        let mut n = 0;
        for (name, var) in &self.vars {
            if pred(name) {
                let vals: Vec<f64> = (0..var.elem_count())
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        std * z
                    })
                    .collect();
                let t = Tensor::from_vec(vals, var.shape(), &self.device)?.to_dtype(self.dtype)?;
                var.set(&t)?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Snapshot as `f32` arrays.
    pub fn export(&self) -> Result<BTreeMap<String, ParamArray>> {
        self.vars
            .iter()
            .map(|(name, var)| Ok((name.clone(), ParamArray::from_tensor(var.as_tensor())?)))
            .collect()
    }

    /// Loads arrays by name. Every parameter of the store must be present; with
    /// `strict`, names the store does not know are an error.
    pub fn import(&self, params: &BTreeMap<String, ParamArray>, strict: bool) -> Result<()> {
        if strict {
            if let Some(unknown) = params.keys().find(|k| !self.vars.contains_key(*k)) {
                return Err(EdenError::Checkpoint(format!(
                    "unknown parameter `{unknown}`"
                )));
            }
        }
        for (name, var) in &self.vars {
            let arr = params
                .get(name)
                .ok_or_else(|| EdenError::Checkpoint(format!("missing parameter `{name}`")))?;
            if arr.dims != var.dims() {
                return Err(EdenError::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    arr.dims,
                    var.dims()
                )));
            }
            var.set(&arr.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }

    fn lookup(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| EdenError::InvalidArgument(format!("no parameter named `{name}`")))
    }
}

pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn sub(&mut self, name: impl Display) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        if self.store.vars.contains_key(&full) {
            return Err(EdenError::InvalidArgument(format!(
                "duplicate parameter `{full}`"
            )));
        }
        let count: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Constant(c) => vec![c; count],
            Init::Normal(std) => (0..count)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut *self.rng);
                    std * z
                })
                .collect(),
            Init::Xavier => {
                let (fan_in, fan_out) = match shape {
                    [i, o] => (*i, *o),
                    _ => (count, count),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..count)
                    .map(|_| self.rng.random_range(-bound..bound))
                    .collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.store.vars.insert(full, var);
        Ok(out)
    }
}

/// Affine map over the last axis; the weight is stored `(in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(b, d_in, d_out, Init::Xavier, Init::Zeros)
    }

    pub fn zeros(b: &mut ParamBuilder, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(b, d_in, d_out, Init::Zeros, Init::Zeros)
    }

    pub fn with_init(
        b: &mut ParamBuilder,
        d_in: usize,
        d_out: usize,
        weight: Init,
        bias: Init,
    ) -> Result<Self> {
        Ok(Self {
            weight: b.param("weight", &[d_in, d_out], weight)?,
            bias: b.param("bias", &[d_out], bias)?,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.bias.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims
            .last()
            .ok_or_else(|| EdenError::shape("rank >= 1", &dims))?;
        let rows = x.elem_count() / d_in.max(1);
        let y = x
            .reshape((rows, d_in))?
            .matmul(&self.weight)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis, optionally with a learned affine.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    affine: Option<(Tensor, Tensor)>,
    eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-6;

    pub fn new(b: &mut ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self {
            affine: Some((
                b.param("weight", &[dim], Init::Constant(1.0))?,
                b.param("bias", &[dim], Init::Zeros)?,
            )),
            eps: Self::EPS,
        })
    }

    pub fn plain() -> Self {
        Self {
            affine: None,
            eps: Self::EPS,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        match &self.affine {
            Some((w, b)) => Ok(normed.broadcast_mul(w)?.broadcast_add(b)?),
            None => Ok(normed),
        }
    }
}

/// Two-layer perceptron with a GELU (tanh approximation) in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, d_in: usize, hidden: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), d_in, hidden)?,
            fc2: Linear::new(&mut b.sub("fc2"), hidden, d_out)?,
        })
    }

    /// Same as [`Mlp::new`] but with a zero output layer.
    pub fn zero_out(
        b: &mut ParamBuilder,
        d_in: usize,
        hidden: usize,
        d_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(&mut b.sub("fc1"), d_in, hidden)?,
            fc2: Linear::zeros(&mut b.sub("fc2"), hidden, d_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }

    pub fn forward_silu(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.silu()?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. Self-attention restricted to a subset of positions is this with the
/// subset as queries and the full sequence as context.
#[derive(Debug, Clone)]
pub struct Attention {
    heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl Attention {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(EdenError::InvalidArgument(format!(
                "dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            heads,
            q: Linear::new(&mut b.sub("q"), dim, dim)?,
            k: Linear::new(&mut b.sub("k"), dim, dim)?,
            v: Linear::new(&mut b.sub("v"), dim, dim)?,
            out: if zero_out {
                Linear::zeros(&mut b.sub("out"), dim, dim)?
            } else {
                Linear::new(&mut b.sub("out"), dim, dim)?
            },
        })
    }

    /// `queries`: `(batch, lq, dim)`, `context`: `(batch, lk, dim)` -> `(batch, lq, dim)`.
    pub fn forward(&self, queries: &Tensor, context: &Tensor) -> Result<Tensor> {
        let (b, lq, d) = queries.dims3()?;
        let (bk, lk, dk) = context.dims3()?;
        if b != bk || d != dk {
            return Err(EdenError::shape((b, "_", d), (bk, lk, dk)));
        }
        let hd = d / self.heads;
        let split = |t: Tensor, l: usize| -> Result<Tensor> {
            Ok(t.reshape((b, l, self.heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = split(self.q.forward(queries)?, lq)?;
        let k = split(self.k.forward(context)?, lk)?;
        let v = split(self.v.forward(context)?, lk)?;
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let weights = softmax_last(&scores)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        self.out.forward(&mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store() -> (ParamStore, ChaCha8Rng) {
        (ParamStore::new(DType::F64), ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn linear_matches_manual_matmul() {
        let (mut s, mut rng) = store();
        let lin = Linear::new(&mut s.builder(&mut rng).sub("l"), 3, 2).unwrap();
        s.set_flat("l.weight", &[1., 2., 3., 4., 5., 6.]).unwrap();
        s.set_flat("l.bias", &[0.5, -0.5]).unwrap();
        let x = Tensor::new(&[[1f64, 0., 1.]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = lin.forward(&x).unwrap().to_vec2().unwrap();
        assert_eq!(y, vec![vec![1. + 5. + 0.5, 2. + 6. - 0.5]]);
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let x = Tensor::new(&[[1f64, 2., 3., 4.]], &Device::Cpu).unwrap();
        let y: Vec<f64> = LayerNorm::plain()
            .forward(&x)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f64, 1001., 999.], [0., 0., 0.]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &y {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!((y[1][0] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_names_rejected() {
        let (mut s, mut rng) = store();
        let mut b = s.builder(&mut rng);
        b.param("w", &[1], Init::Zeros).unwrap();
        assert!(b.param("w", &[1], Init::Zeros).is_err());
    }

    #[test]
    fn strict_import_rejects_unknown_names() {
        let (mut s, mut rng) = store();
        s.builder(&mut rng)
            .param("w", &[2], Init::Normal(1.0))
            .unwrap();
        let mut exported = s.export().unwrap();
        s.import(&exported, true).unwrap();
        exported.insert("bogus".into(), ParamArray::new(vec![1], vec![0.0]).unwrap());
        assert!(s.import(&exported, true).is_err());
        s.import(&exported, false).unwrap();
    }
}

use candle_core::{Device, Tensor};

use crate::error::{EdenError, Result};
use crate::nn::{Init, ParamBuilder};

/// Learnable `(grid_h, grid_w, dim)` table, resized bilinearly when the token
/// grid differs from the native one.
#[derive(Debug, Clone)]
pub struct PositionEmbedding {
    table: Tensor,
}

impl PositionEmbedding {
    pub fn new(b: &mut ParamBuilder, grid_h: usize, grid_w: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.param("table", &[grid_h, grid_w, dim], Init::Normal(0.02))?,
        })
    }

    pub fn from_table(table: Tensor) -> Result<Self> {
        table.dims3()?;
        Ok(Self { table })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn grid(&self) -> (usize, usize) {
        let d = self.table.dims();
        (d[0], d[1])
    }

    pub fn interpolate(&self, new_h: usize, new_w: usize) -> Result<Self> {
        Ok(Self {
            table: self.table_for(new_h, new_w)?,
        })
    }

    /// The table itself at the native size, otherwise a differentiable resize of it.
    pub fn table_for(&self, new_h: usize, new_w: usize) -> Result<Tensor> {
        if new_h == 0 || new_w == 0 {
            return Err(EdenError::InvalidArgument(format!(
                "position embedding target {new_h}x{new_w} must be positive"
            )));
        }
        if self.grid() == (new_h, new_w) {
            return Ok(self.table.clone());
        }
        let resized = resize_bilinear(&self.table.unsqueeze(0)?, new_h, new_w)?;
        Ok(resized.squeeze(0)?)
    }
}

/// Corner-aligned linear interpolation weights, `(n_out, n_in)` row-major.
fn interp_matrix(n_in: usize, n_out: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    for i in 0..n_out {
        let src = if n_out == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (src.floor() as usize).min(n_in - 1);
        let frac = src - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        if lo + 1 < n_in {
            m[i * n_in + lo + 1] += frac;
        }
    }
    m
}

/// Bilinear resize of `(batch, h, w, d)` to `(batch, new_h, new_w, d)`.
pub fn resize_bilinear(x: &Tensor, new_h: usize, new_w: usize) -> Result<Tensor> {
    let (b, h, w, d) = x.dims4()?;
    if h == 0 || w == 0 || new_h == 0 || new_w == 0 {
        return Err(EdenError::InvalidArgument(format!(
            "cannot resize {h}x{w} to {new_h}x{new_w}"
        )));
    }
    let dev = Device::Cpu;
    let ry = Tensor::from_vec(interp_matrix(h, new_h), (new_h, h), &dev)?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(interp_matrix(w, new_w), (new_w, w), &dev)?.to_dtype(x.dtype())?;
    let rows = ry
        .matmul(&x.transpose(0, 1)?.contiguous()?.reshape((h, b * w * d))?)?
        .reshape((new_h, b, w, d))?;
    let cols = rx
        .matmul(
            &rows
                .permute((2, 1, 0, 3))?
                .contiguous()?
                .reshape((w, b * new_h * d))?,
        )?
        .reshape((new_w, b, new_h, d))?;
    Ok(cols.permute((1, 2, 0, 3))?.contiguous()?)
}

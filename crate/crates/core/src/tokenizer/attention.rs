//! The two attention modules of a tokenizer block.

use candle_core::Tensor;

use crate::error::{EdenError, Result};
use crate::nn::{Attention, LayerNorm, ParamBuilder};
use crate::tokenizer::tokens::TokenGrid;

/// Index of the intermediate-frame token inside a 9-token temporal group.
pub const TEMPORAL_CENTER: usize = 4;
/// Context tokens each frame contributes to a temporal group.
pub const GROUP: usize = 4;

/// Pyramid feature fusion: self-attention over `[large; small]` of which only
/// the small-scale positions are kept, as a pre-norm residual on the small stream.
#[derive(Debug, Clone)]
pub struct PyramidFusion {
    norm: LayerNorm,
    attn: Attention,
}

impl PyramidFusion {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
            attn: Attention::new(&mut b.sub("attn"), dim, heads, zero_out)?,
        })
    }

    pub fn forward(&self, stream: &TokenGrid, large: &TokenGrid) -> Result<TokenGrid> {
        let (m, n) = (large.count(), stream.count());
        if m != 4 * n || large.batch() != stream.batch() || large.dim() != stream.dim() {
            return Err(EdenError::Dimension(format!(
                "fusion needs large count = 4 x small count, got {m} and {n}"
            )));
        }
        let joint = self
            .norm
            .forward(&Tensor::cat(&[&large.tokens, &stream.tokens], 1)?)?;
        // Only the trailing n rows of the full self-attention are kept, so only
        // their queries are computed.
        let queries = joint.narrow(1, m, n)?;
        let update = self.attn.forward(&queries, &joint)?;
        stream.with_tokens((&stream.tokens + update)?)
    }
}

/// Per-location attention over `(ctx0[0..4], stream, ctx1[0..4])`, keeping the
/// intermediate position; locations never exchange information.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    norm: LayerNorm,
    attn: Attention,
}

impl TemporalAttention {
    pub fn new(b: &mut ParamBuilder, dim: usize, heads: usize, zero_out: bool) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(&mut b.sub("norm"), dim)?,
            attn: Attention::new(&mut b.sub("attn"), dim, heads, zero_out)?,
        })
    }

    /// `stream`: `(batch, n, dim)`; contexts: `(batch, n, 4, dim)`.
    pub fn forward(&self, stream: &Tensor, ctx0: &Tensor, ctx1: &Tensor) -> Result<Tensor> {
        let (b, n, d) = stream.dims3()?;
        let seq = temporal_sequence(stream, ctx0, ctx1)?.reshape((b * n, 2 * GROUP + 1, d))?;
        let seq = self.norm.forward(&seq)?;
        let query = seq.narrow(1, TEMPORAL_CENTER, 1)?;
        let update = self.attn.forward(&query, &seq)?.reshape((b, n, d))?;
        Ok((stream + update)?)
    }
}

/// Builds the `(batch, n, 9, dim)` temporal groups with the stream token at index 4.
pub fn temporal_sequence(stream: &Tensor, ctx0: &Tensor, ctx1: &Tensor) -> Result<Tensor> {
    let (b, n, d) = stream.dims3()?;
    for ctx in [ctx0, ctx1] {
        if ctx.dims() != [b, n, GROUP, d] {
            return Err(EdenError::Dimension(format!(
                "context groups {:?} do not match stream {:?}",
                ctx.dims(),
                stream.dims()
            )));
        }
    }
    Ok(Tensor::cat(&[ctx0, &stream.unsqueeze(2)?, ctx1], 2)?)
}

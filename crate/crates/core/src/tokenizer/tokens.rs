//! Token grids and the geometric ops between the two token scales.
//!
//! A large-scale grid has one token per `patch x patch` pixel block; the
//! small-scale grid has one token per 2x2 block of large tokens, so a large grid
//! always holds exactly four times as many tokens as its small counterpart.

use candle_core::Tensor;

use crate::error::{EdenError, Result};
use crate::nn::{Linear, ParamBuilder};
use crate::tokenizer::pos_embed::PositionEmbedding;

/// Tokens `(batch, grid_h * grid_w, dim)` laid out row-major over a 2D grid.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, grid_h: usize, grid_w: usize) -> Result<Self> {
        let (_, count, _) = tokens.dims3()?;
        if grid_h == 0 || grid_w == 0 || grid_h * grid_w != count {
            return Err(EdenError::Dimension(format!(
                "grid {grid_h}x{grid_w} does not hold {count} tokens"
            )));
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn batch(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn count(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn with_tokens(&self, tokens: Tensor) -> Result<Self> {
        Self::new(tokens, self.grid_h, self.grid_w)
    }

    /// Adds a position embedding, interpolating its table if the grid differs.
    pub fn add_position(&self, pe: &PositionEmbedding) -> Result<Self> {
        let table = pe.table_for(self.grid_h, self.grid_w)?;
        let flat = table.reshape((1, self.count(), self.dim()))?;
        self.with_tokens(self.tokens.broadcast_add(&flat)?)
    }

    fn check_even(&self) -> Result<()> {
        if !self.grid_h.is_multiple_of(2) || !self.grid_w.is_multiple_of(2) {
            return Err(EdenError::Dimension(format!(
                "grid {}x{} must be even on both sides",
                self.grid_h, self.grid_w
            )));
        }
        Ok(())
    }

    /// View as `(batch, grid_h / 2, 2, grid_w / 2, 2, dim)` blocks.
    fn blocks(&self) -> Result<Tensor> {
        self.check_even()?;
        Ok(self.tokens.reshape((
            self.batch(),
            self.grid_h / 2,
            2,
            self.grid_w / 2,
            2,
            self.dim(),
        ))?)
    }
}

/// 2x2 average pooling of a large-scale grid.
pub fn pool_tokens(large: &TokenGrid) -> Result<TokenGrid> {
    let (b, d) = (large.batch(), large.dim());
    let (h, w) = (large.grid_h / 2, large.grid_w / 2);
    let pooled = large.blocks()?.mean(4)?.mean(2)?.reshape((b, h * w, d))?;
    TokenGrid::new(pooled, h, w)
}

/// Nearest-neighbour 2x upsampling: each token is replicated over its 2x2 block.
pub fn upsample_tokens(small: &TokenGrid) -> Result<TokenGrid> {
    let (b, d) = (small.batch(), small.dim());
    let (h, w) = (small.grid_h, small.grid_w);
    let up = small
        .tokens
        .reshape((b, h, 1, w, 1, d))?
        .broadcast_as((b, h, 2, w, 2, d))?
        .contiguous()?
        .reshape((b, 4 * h * w, d))?;
    TokenGrid::new(up, 2 * h, 2 * w)
}

/// Bilinear 2x upsampling (corner-aligned), the alternative decoder mode.
pub fn upsample_tokens_bilinear(small: &TokenGrid) -> Result<TokenGrid> {
    let (b, d) = (small.batch(), small.dim());
    let (h, w) = (2 * small.grid_h, 2 * small.grid_w);
    let grid = small.tokens.reshape((b, small.grid_h, small.grid_w, d))?;
    let up = crate::tokenizer::pos_embed::resize_bilinear(&grid, h, w)?;
    TokenGrid::new(up.reshape((b, h * w, d))?, h, w)
}

/// Groups every 2x2 block of a large-scale grid under the small-scale token that
/// covers it: `(batch, n, 4, dim)` with block order top-left, top-right,
/// bottom-left, bottom-right.
pub fn group_context(ctx: &TokenGrid) -> Result<Tensor> {
    let (b, d) = (ctx.batch(), ctx.dim());
    let n = ctx.count() / 4;
    Ok(ctx
        .blocks()?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, n, 4, d))?)
}

/// `(batch, h, w, 3)` pixels -> `(batch, (h / p) * (w / p), p * p * 3)` patches.
pub fn patchify(frames: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, h, w, c) = frames.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(EdenError::Dimension(format!(
            "frame {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(frames
        .reshape((b, gh, patch, gw, patch, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Inverse of [`patchify`]: each token's channel vector becomes a `patch x patch`
/// RGB block (pixel shuffle).
pub fn unpatchify(tokens: &Tensor, grid_h: usize, grid_w: usize, patch: usize) -> Result<Tensor> {
    let (b, n, c) = tokens.dims3()?;
    if n != grid_h * grid_w || c != patch * patch * 3 {
        return Err(EdenError::shape(
            (b, grid_h * grid_w, patch * patch * 3),
            (b, n, c),
        ));
    }
    Ok(tokens
        .reshape((b, grid_h, grid_w, patch, patch, 3))?
        .permute((0, 1, 3, 2, 4, 5))?
        .contiguous()?
        .reshape((b, grid_h * patch, grid_w * patch, 3))?)
}

/// Linear projection of non-overlapping patches plus a large-scale position embedding.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    patch: usize,
    proj: Linear,
    pos: PositionEmbedding,
}

impl PatchEmbed {
    pub fn new(
        b: &mut ParamBuilder,
        patch: usize,
        dim: usize,
        native_grid: (usize, usize),
    ) -> Result<Self> {
        Ok(Self {
            patch,
            proj: Linear::new(&mut b.sub("proj"), patch * patch * 3, dim)?,
            pos: PositionEmbedding::new(&mut b.sub("pos"), native_grid.0, native_grid.1, dim)?,
        })
    }

    pub fn position(&self) -> &PositionEmbedding {
        &self.pos
    }

    /// `(batch, h, w, 3)` -> large-scale grid `(h / p) x (w / p)`.
    pub fn forward(&self, frames: &Tensor) -> Result<TokenGrid> {
        let (_, h, w, _) = frames.dims4()?;
        let patches = patchify(frames, self.patch)?;
        TokenGrid::new(self.proj.forward(&patches)?, h / self.patch, w / self.patch)?
            .add_position(&self.pos)
    }
}

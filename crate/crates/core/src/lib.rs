//! Latent-diffusion video frame interpolation.
//!
//! The pipeline has two learned parts. A [`tokenizer::Tokenizer`] compresses the
//! intermediate frame of a triplet into a short sequence of latent tokens while
//! attending to the start and end frames, and decodes tokens back to pixels. A
//! [`diffusion::Dit`] generates those tokens from noise by integrating a
//! rectified-flow velocity field, conditioned on the start/end frames through
//! temporal attention and a frame-difference embedding.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod losses;
pub mod nn;
pub mod seed;
pub mod tokenizer;
pub mod training;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, DatasetStats, ModelKind};
pub use error::{EdenError, Result};
pub use frame::Frame;
pub use tokenizer::{LatentPosterior, TokenGrid, Tokenizer, TokenizerConfig};

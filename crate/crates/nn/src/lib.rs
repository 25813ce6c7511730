//! Minimal dense tensor core with reverse-mode gradients.
//!
//! Provides exactly what an attention-based policy needs at desk scale:
//! dense layers, multi-head attention (shared and per-row grouped keys),
//! layer normalization, softmax, a PPO clip node, Adam, and a documented
//! checkpoint format.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use adam::Adam;
pub use layers::{AttentionLayer, AttentionOutput, EncoderBlock, FeedForward, LayerNorm, Linear};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{clipped_surrogate, masked_softmax_in_place, softmax_in_place, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("attention row {row} has every key masked")]
    AllMaskedRow { row: usize },
    #[error("feature dimension {dim} is not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

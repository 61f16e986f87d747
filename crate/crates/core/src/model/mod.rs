//! A small transformer encoder built from scratch: embeddings, multi-head
//! self-attention, GELU feed-forward blocks and post-layer normalization,
//! with a generator head (masked-token prediction over the vocabulary) and
//! a discriminator head (per-token replaced/original plus a pooled
//! sequence-level classifier). Reverse-mode gradients are derived by hand
//! and checked against finite differences in the test suite.

mod checkpoint;
mod config;
mod net;
mod params;

pub use checkpoint::{
    f16_bits_to_f32, f32_to_f16_bits, load_checkpoint, round_through_f16, save_checkpoint,
    Checkpoint, CheckpointError, Precision,
};
pub use config::{ModelConfig, Role, SizePreset};
pub use net::{backward, forward, sigmoid, softmax_rows, Forward, HeadGrads, HeadOutput};
pub use params::{init_params, EncoderLayer, Head, LayerNorm, Linear, ModelParams, TensorMut, TensorRef};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token id {id} out of vocabulary range {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("sequence length {len} exceeds max_position {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("empty sequence")]
    EmptySequence,
}

/// Floating-point scalar the network is generic over. Training and
/// inference default to `f32`; gradient checks run at `f64`.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + 'static
{
    fn of_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).expect("finite f64 converts")
    }
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

//! Bark-band gain predictor: dual-branch depthwise-separable encoder,
//! GRU + fully connected bottleneck, subpixel decoder with skip blocks.
//!
//! Activations use a `[batch, channel, feature, time]` layout. Every
//! encoder convolution is causal in time, so the same parameters drive both
//! whole-sequence ([`forward_sequence`]) and frame-by-frame
//! ([`StreamState`] / [`forward_frame`]) inference.

mod budget;
mod config;
mod gru;
mod network;
pub mod ops;
mod params;
mod stream;
mod tensor;
pub mod weights;

pub use budget::{count_macs_per_frame, count_macs_per_second, count_params, count_trainable_params, summary, LayerSummary};
pub use config::{DecoderShape, EncoderShape, ModelConfig, ShapeLedger};
pub use network::{backward, forward_batch, forward_sequence, BnMode, ForwardCache};
pub use params::{init_params, is_trainable, param_shapes, Gradients, ModelParams};
pub use stream::{forward_frame, StreamState};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("shape contract violated: {0}")]
    Shape(String),
    #[error("missing parameter tensor `{0}`")]
    MissingTensor(String),
    #[error("stream state not initialized for this model")]
    Uninitialized,
    #[error("backward requires a forward pass in training mode")]
    NotTrainingCache,
    #[error("non-finite gradient in layer `{0}`")]
    NonFinite(String),
}

//! Hybrid acoustic echo cancellation.
//!
//! A partitioned-block frequency-domain Kalman filter removes the linear echo,
//! then a small U-Net style network predicts per-Bark-band suppression gains
//! that are interpolated to a spectral mask on the microphone spectrum.
//!
//! Every numeric path is generic over [`Real`] (`f32` or `f64`). Training and
//! the gradient checks run in `f64`; streaming inference may use either. The
//! `*F32` / `*F64` aliases below name the common instantiations.

pub mod bark;
pub mod config;
pub mod dsp;
pub mod eval;
pub mod linear_aec;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod scalar;
pub mod sim;
pub mod training;

pub use scalar::Real;

pub use bark::{BarkMatrix, FeatureAssembler, GainVector};
pub use dsp::{AudioBuffer, SpectrumFrame, Stft, StftConfig};
pub use linear_aec::{KalmanAec, KalmanConfig, LinearAecBlockOut};
pub use model::{ModelConfig, ModelParams, StreamState, Tensor};
pub use pipeline::{PipelineConfig, StreamingCanceller};

/// Fixed sample rate of every signal handled by the engine.
pub const SAMPLE_RATE: u32 = 16_000;

pub type AudioBufferF32 = AudioBuffer<f32>;
pub type AudioBufferF64 = AudioBuffer<f64>;
pub type StftF32 = Stft<f32>;
pub type StftF64 = Stft<f64>;
pub type KalmanAecF32 = KalmanAec<f32>;
pub type KalmanAecF64 = KalmanAec<f64>;
pub type BarkMatrixF32 = BarkMatrix<f32>;
pub type BarkMatrixF64 = BarkMatrix<f64>;
pub type ModelParamsF32 = ModelParams<f32>;
pub type ModelParamsF64 = ModelParams<f64>;
pub type StreamStateF32 = StreamState<f32>;
pub type StreamStateF64 = StreamState<f64>;
pub type StreamingCancellerF32 = StreamingCanceller<f32>;
pub type StreamingCancellerF64 = StreamingCanceller<f64>;

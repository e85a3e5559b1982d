//! STFT analysis/synthesis and audio buffer primitives.

mod stft;
pub mod wav;

pub use stft::{istft, stft, SpectrumFrame, Stft, StftConfig, StreamingAnalyzer, StreamingSynthesizer};

use thiserror::Error;

use crate::scalar::Real;
use crate::SAMPLE_RATE;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid STFT configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite sample at index {0}")]
    NonFinite(usize),
    #[error("sample rate {0} Hz is not supported (expected 16000 Hz)")]
    SampleRate(u32),
    #[error("frame has {got} bins, expected {expected}")]
    FrameLength { expected: usize, got: usize },
}

/// Mono waveform at 16 kHz.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    samples: Vec<T>,
    sample_rate: u32,
}

impl<T: Real> AudioBuffer<T> {
    pub fn new(samples: Vec<T>) -> Result<Self, DspError> {
        Self::with_rate(samples, SAMPLE_RATE)
    }

    pub fn with_rate(samples: Vec<T>, sample_rate: u32) -> Result<Self, DspError> {
        if sample_rate != SAMPLE_RATE {
            return Err(DspError::SampleRate(sample_rate));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(DspError::NonFinite(i));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn zeros(len: usize) -> Self {
        Self { samples: vec![T::zero(); len], sample_rate: SAMPLE_RATE }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn cast<U: Real>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self.samples.iter().map(|&s| U::lit(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Mean power of a slice; zero for an empty slice.
pub fn mean_power<T: Real>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    x.iter().map(|&v| v * v).sum::<T>() / T::from_usize_lossy(x.len())
}

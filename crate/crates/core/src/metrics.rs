//! Objective metrics and the `EFEM` layer-embedding exchange format.

use std::path::Path;

use thiserror::Error;

pub use crate::linear_aec::{erle, erle_total, ERLE_CAP_DB};
use crate::scalar::Real;

/// SI-SDR values are clamped to `±60 dB`.
pub const SI_SDR_CAP_DB: f64 = 60.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("embedding file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed embedding file: {0}")]
    Format(String),
}

/// Scale-invariant SDR of `est` against `reference`, in dB.
pub fn si_sdr<T: Real>(est: &[T], reference: &[T]) -> Result<f64, MetricsError> {
    if est.len() != reference.len() {
        return Err(MetricsError::Contract(format!("lengths differ: {} vs {}", est.len(), reference.len())));
    }
    let rr: f64 = reference.iter().map(|v| v.as_f64().powi(2)).sum();
    if rr <= 0.0 {
        return Err(MetricsError::Contract("reference is all zeros".into()));
    }
    let alpha = est.iter().zip(reference).map(|(e, r)| e.as_f64() * r.as_f64()).sum::<f64>() / rr;
    let (mut pt, mut pn) = (0.0, 0.0);
    for (e, r) in est.iter().zip(reference) {
        let t = alpha * r.as_f64();
        pt += t * t;
        pn += (e.as_f64() - t).powi(2);
    }
    if pn <= 0.0 {
        return Ok(SI_SDR_CAP_DB);
    }
    if pt <= 0.0 {
        return Ok(-SI_SDR_CAP_DB);
    }
    Ok((10.0 * (pt / pn).log10()).clamp(-SI_SDR_CAP_DB, SI_SDR_CAP_DB))
}

pub const EFEM_MAGIC: &[u8; 4] = b"EFEM";
pub const EFEM_VERSION: u32 = 1;

/// Layer embeddings `[layers, frames, dims]`, row-major float32.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingFile {
    pub layers: usize,
    pub frames: usize,
    pub dims: usize,
    pub data: Vec<f32>,
}

impl EmbeddingFile {
    pub fn new(layers: usize, frames: usize, dims: usize, data: Vec<f32>) -> Result<Self, MetricsError> {
        if data.len() != layers * frames * dims {
            return Err(MetricsError::Format(format!("payload holds {} values, header implies {}", data.len(), layers * frames * dims)));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MetricsError::Format(format!("non-finite value at index {i}")));
        }
        Ok(Self { layers, frames, dims, data })
    }

    pub fn layer(&self, l: usize) -> &[f32] {
        let n = self.frames * self.dims;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 4 * self.data.len());
        out.extend_from_slice(EFEM_MAGIC);
        for v in [EFEM_VERSION, self.layers as u32, self.frames as u32, self.dims as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MetricsError> {
        if bytes.len() < 20 || &bytes[..4] != EFEM_MAGIC {
            return Err(MetricsError::Format("missing EFEM header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != EFEM_VERSION {
            return Err(MetricsError::Format(format!("unsupported version {}", word(0))));
        }
        let (l, t, d) = (word(1) as usize, word(2) as usize, word(3) as usize);
        let payload = &bytes[20..];
        let expect = l.checked_mul(t).and_then(|n| n.checked_mul(d)).and_then(|n| n.checked_mul(4));
        if expect != Some(payload.len()) {
            return Err(MetricsError::Format(format!("payload is {} bytes, expected L·T·D·4 for {l}×{t}×{d}", payload.len())));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(l, t, d, data)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, MetricsError> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), MetricsError> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }
}

/// Mean over layers of the per-element mean squared difference.
pub fn embedding_distance(a: &EmbeddingFile, b: &EmbeddingFile) -> Result<f64, MetricsError> {
    if (a.layers, a.frames, a.dims) != (b.layers, b.frames, b.dims) {
        return Err(MetricsError::Contract(format!(
            "shape {}×{}×{} vs {}×{}×{}",
            a.layers, a.frames, a.dims, b.layers, b.frames, b.dims
        )));
    }
    if a.layers == 0 || a.frames * a.dims == 0 {
        return Err(MetricsError::Contract("empty embeddings".into()));
    }
    let n = (a.frames * a.dims) as f64;
    let total: f64 = (0..a.layers)
        .map(|l| a.layer(l).iter().zip(b.layer(l)).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>() / n)
        .sum();
    Ok(total / a.layers as f64)
}

//! `EFWT` weight files.
//!
//! ```text
//! "EFWT" | u32 version (1) | u32 tensor count
//! per tensor: u32 name length | UTF-8 name | u8 rank | rank × u32 dims | f32 payload
//! u32 CRC32 of everything between the header and the checksum
//! ```
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use super::{ModelConfig, ModelError, ModelParams, Tensor};
use crate::scalar::Real;

pub const MAGIC: &[u8; 4] = b"EFWT";
pub const VERSION: u32 = 1;
const HEADER: usize = 12;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("weight file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not an EFWT file (bad magic)")]
    BadMagic,
    #[error("unsupported EFWT version {0}")]
    Version(u32),
    #[error("tensor table truncated while reading {0}")]
    Truncated(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("integrity: {0}")]
    Integrity(String),
    #[error("weights do not match the model config: {0}")]
    Shape(#[from] ModelError),
}

/// Encode named tensors (payloads narrowed to f32).
pub fn encode<T: Real>(tensors: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out[HEADER..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8], WeightsError> {
        if self.pos + n > self.buf.len() {
            return Err(WeightsError::Truncated(what.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<BTreeMap<String, Tensor<f32>>, WeightsError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 4 };
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32("header")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        if r.remaining() == 4 {
            return Err(WeightsError::Integrity(format!("header declares {count} tensors, file holds {i}")));
        }
        let what = format!("tensor #{i}");
        let len = r.u32(&what)? as usize;
        let name = std::str::from_utf8(r.take(len, &what)?)
            .map_err(|_| WeightsError::Integrity(format!("{what} name is not UTF-8")))?
            .to_string();
        let rank = r.take(1, &name)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32(&name)? as usize);
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or_else(|| WeightsError::Integrity(format!("`{name}` too large")))?, &name)?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), Tensor::from_vec(&shape, data)).is_some() {
            return Err(WeightsError::Integrity(format!("duplicate tensor `{name}`")));
        }
    }
    match r.remaining() {
        4 => {}
        n if n < 4 => return Err(WeightsError::Truncated("checksum".into())),
        _ => return Err(WeightsError::Integrity(format!("data past the {count} declared tensors"))),
    }
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(&bytes[HEADER..bytes.len() - 4]);
    if stored != computed {
        return Err(WeightsError::Checksum { stored, computed });
    }
    Ok(tensors)
}

pub fn write_tensors<T: Real>(tensors: &BTreeMap<String, Tensor<T>>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    std::fs::write(path, encode(tensors))?;
    Ok(())
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<BTreeMap<String, Tensor<f32>>, WeightsError> {
    decode(&std::fs::read(path)?)
}

pub fn save_params<T: Real>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<(), WeightsError> {
    write_tensors(params.tensors(), path)
}

/// Load and check every tensor against `cfg`.
pub fn load_params<T: Real>(path: impl AsRef<Path>, cfg: &ModelConfig) -> Result<ModelParams<T>, WeightsError> {
    let raw = read_tensors(path)?;
    let cast = raw.into_iter().map(|(k, v)| (k, v.cast::<T>())).collect();
    Ok(ModelParams::from_tensors(cfg, cast)?)
}

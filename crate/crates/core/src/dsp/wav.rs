//! Mono 16 kHz WAV I/O (PCM16 and IEEE float32).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use thiserror::Error;

use super::AudioBuffer;
use crate::scalar::Real;
use crate::SAMPLE_RATE;

#[derive(Debug, Error)]
pub enum WavError {
    #[error("{path}: sample rate {rate} Hz, expected 16000 Hz")]
    SampleRate { path: String, rate: u32 },
    #[error("{path}: {channels} channels, expected mono")]
    Channels { path: String, channels: u16 },
    #[error("{path}: unsupported encoding ({bits}-bit {format:?})")]
    Encoding { path: String, bits: u16, format: SampleFormat },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: malformed WAV: {msg}")]
    Corrupt { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

fn classify(path: &Path, err: hound::Error) -> WavError {
    let path = path.display().to_string();
    match err {
        hound::Error::IoError(source) if source.kind() == std::io::ErrorKind::NotFound => {
            WavError::Io { path, source }
        }
        other => WavError::Corrupt { path, msg: other.to_string() },
    }
}

pub fn read_wav<T: Real>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>, WavError> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path).map_err(|e| classify(path, e))?;
    let spec = reader.spec();
    let name = || path.display().to_string();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(WavError::SampleRate { path: name(), rate: spec.sample_rate });
    }
    if spec.channels != 1 {
        return Err(WavError::Channels { path: name(), channels: spec.channels });
    }
    let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| T::lit(v as f64 / 32768.0)))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| T::lit(v as f64)))
            .collect::<Result<_, _>>()
            .map_err(|e| classify(path, e))?,
        (format, bits) => return Err(WavError::Encoding { path: name(), bits, format }),
    };
    AudioBuffer::new(samples).map_err(|e| WavError::Corrupt { path: name(), msg: e.to_string() })
}

pub fn write_wav<T: Real>(path: impl AsRef<Path>, audio: &AudioBuffer<T>, encoding: WavEncoding) -> Result<(), WavError> {
    let path = path.as_ref();
    let (bits, format) = match encoding {
        WavEncoding::Pcm16 => (16, SampleFormat::Int),
        WavEncoding::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec { channels: 1, sample_rate: audio.sample_rate(), bits_per_sample: bits, sample_format: format };
    let mut writer = WavWriter::create(path, spec).map_err(|e| classify(path, e))?;
    for &s in audio.samples() {
        let r = match encoding {
            WavEncoding::Pcm16 => {
                let v = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                writer.write_sample(v)
            }
            WavEncoding::Float32 => writer.write_sample(s.as_f64() as f32),
        };
        r.map_err(|e| classify(path, e))?;
    }
    writer.finalize().map_err(|e| classify(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn float32_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f32> = (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.7).collect();
        write_wav(&p, &AudioBuffer::new(x.clone()).unwrap(), WavEncoding::Float32).unwrap();
        let y: AudioBuffer<f32> = read_wav(&p).unwrap();
        assert_eq!(y.samples(), &x[..]);
    }

    #[test]
    fn pcm16_decodes_over_32768() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        let x = vec![0.5f64, -1.0, 0.25, 32767.0 / 32768.0];
        write_wav(&p, &AudioBuffer::new(x.clone()).unwrap(), WavEncoding::Pcm16).unwrap();
        let y: AudioBuffer<f64> = read_wav(&p).unwrap();
        assert_eq!(y.samples(), &x[..]);
    }

    #[test]
    fn wrong_rate_and_garbage_are_distinct_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.wav");
        let spec = WavSpec { channels: 1, sample_rate: 48_000, bits_per_sample: 16, sample_format: SampleFormat::Int };
        let mut w = WavWriter::create(&p, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav::<f32>(&p), Err(WavError::SampleRate { rate: 48_000, .. })));

        let g = dir.path().join("d.wav");
        std::fs::write(&g, b"definitely not a riff file").unwrap();
        assert!(matches!(read_wav::<f32>(&g), Err(WavError::Corrupt { .. })));
        assert!(matches!(read_wav::<f32>(dir.path().join("missing.wav")), Err(WavError::Io { .. })));
    }
}

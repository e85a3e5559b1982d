//! Sectioned run configuration (`[stft]`, `[kalman]`, `[bark]`, `[model]`,
//! `[sim]`, `[train]`, `[paths]`). Every section is optional and defaults to
//! the reference values; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bark::{BarkMatrix, FeatureAssembler};
use crate::dsp::{Stft, StftConfig};
use crate::linear_aec::KalmanConfig;
use crate::model::ModelConfig;
use crate::scalar::Real;
use crate::sim::SimConfig;
use crate::training::{FrontEnd, TrainConfig};
use crate::SAMPLE_RATE;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    /// An unrecognized key; `key` names it.
    #[error("unknown config key `{key}`: {msg}")]
    UnknownKey { key: String, msg: String },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftSection {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
}

impl Default for StftSection {
    fn default() -> Self {
        Self { win_len: 512, hop: 256, fft_len: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KalmanSection {
    pub partitions: usize,
    pub fft_len: usize,
    pub block_len: usize,
    pub transition_factor: f64,
    pub process_noise_floor: f64,
    pub psd_smoothing: f64,
    pub initial_state_variance: f64,
    pub divide_guard: f64,
    pub observation_noise_scale: f64,
    pub variance_update_factor: f64,
}

impl Default for KalmanSection {
    fn default() -> Self {
        let k = KalmanConfig::<f64>::default();
        Self {
            partitions: k.partitions,
            fft_len: k.fft_len,
            block_len: k.block_len,
            transition_factor: k.transition_factor,
            process_noise_floor: k.process_noise_floor,
            psd_smoothing: k.psd_smoothing,
            initial_state_variance: k.initial_state_variance,
            divide_guard: k.divide_guard,
            observation_noise_scale: k.observation_noise_scale,
            variance_update_factor: k.variance_update_factor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarkSection {
    pub n_bands: usize,
}

impl Default for BarkSection {
    fn default() -> Self {
        Self { n_bands: 100 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub weights: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub stft: StftSection,
    pub kalman: KalmanSection,
    pub bark: BarkSection,
    pub model: ModelConfig,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub paths: PathsSection,
}

/// Shipped reference configuration.
pub const REFERENCE_TOML: &str = include_str!("../../../echofree.toml");

/// Extract the key from a serde "unknown field `x`" message.
fn unknown_key(msg: &str) -> Option<String> {
    let rest = &msg[msg.find("unknown field `")? + "unknown field `".len()..];
    Some(rest[..rest.find('`')?].to_string())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            match unknown_key(&msg) {
                Some(key) => ConfigError::UnknownKey { key, msg: e.to_string() },
                None => ConfigError::Parse(e.to_string()),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Small-data settings used by the desk-scale tests and demos.
    pub fn desk() -> Self {
        let mut cfg = Self { sim: SimConfig::desk(), ..Self::default() };
        cfg.train.batch_size = 16;
        cfg.train.segment_s = 2.0;
        cfg
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.stft_config::<f64>()?;
        self.kalman_config::<f64>()?;
        if self.kalman.block_len * 2 != self.stft.hop {
            return bad(format!("kalman.block_len ({}) × 2 must equal stft.hop ({})", self.kalman.block_len, self.stft.hop));
        }
        self.model.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let width = FeatureAssembler::<f64>::width(self.bark.n_bands);
        if self.bark.n_bands == 0 || self.model.in_features != width || self.model.out_bands != self.bark.n_bands {
            return bad(format!(
                "model expects {} input features and {} bands; {} Bark bands give {width} features",
                self.model.in_features, self.model.out_bands, self.bark.n_bands
            ));
        }
        self.sim.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn stft_config<T: Real>(&self) -> Result<StftConfig<T>, ConfigError> {
        let s = &self.stft;
        StftConfig::new(s.win_len, s.hop, s.fft_len).map_err(|e| ConfigError::Invalid(format!("stft: {e}")))
    }

    pub fn kalman_config<T: Real>(&self) -> Result<KalmanConfig<T>, ConfigError> {
        let k = &self.kalman;
        let cfg = KalmanConfig {
            partitions: k.partitions,
            fft_len: k.fft_len,
            block_len: k.block_len,
            transition_factor: T::lit(k.transition_factor),
            process_noise_floor: T::lit(k.process_noise_floor),
            psd_smoothing: T::lit(k.psd_smoothing),
            initial_state_variance: T::lit(k.initial_state_variance),
            divide_guard: T::lit(k.divide_guard),
            observation_noise_scale: T::lit(k.observation_noise_scale),
            variance_update_factor: T::lit(k.variance_update_factor),
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(format!("kalman: {e}")))?;
        Ok(cfg)
    }

    pub fn bark_matrix<T: Real>(&self) -> BarkMatrix<T> {
        BarkMatrix::new(self.bark.n_bands, self.stft.fft_len / 2 + 1, SAMPLE_RATE)
    }

    /// Training front end (linear AEC, STFT, Bark features) for this config.
    pub fn front_end<T: Real>(&self) -> Result<FrontEnd<T>, ConfigError> {
        let stft = Stft::new(self.stft_config()?).map_err(|e| ConfigError::Invalid(format!("stft: {e}")))?;
        Ok(FrontEnd::new(stft, self.bark_matrix(), self.kalman_config()?))
    }

    /// Window plus one linear-filter block, in samples.
    pub fn latency_samples(&self) -> usize {
        self.stft.win_len + self.kalman.block_len
    }

    pub fn latency_ms(&self) -> f64 {
        1000.0 * self.latency_samples() as f64 / SAMPLE_RATE as f64
    }

    /// STFT frames per second.
    pub fn frame_rate(&self) -> f64 {
        SAMPLE_RATE as f64 / self.stft.hop as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_file_equals_defaults() {
        let cfg = PipelineConfig::from_toml_str(REFERENCE_TOML).unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(PipelineConfig::from_toml_str("").unwrap(), cfg);
        let again = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn latency_is_forty_ms() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.latency_samples(), 640);
        assert!((cfg.latency_ms() - 40.0).abs() < 1e-12);
        assert!((cfg.frame_rate() - 62.5).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_are_named() {
        match PipelineConfig::from_toml_str("[kalman]\npartitons = 10\n") {
            Err(ConfigError::UnknownKey { key, .. }) => assert_eq!(key, "partitons"),
            other => panic!("{other:?}"),
        }
        match PipelineConfig::from_toml_str("[nope]\nx = 1\n") {
            Err(ConfigError::UnknownKey { key, .. }) => assert_eq!(key, "nope"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn block_must_be_half_hop() {
        let e = PipelineConfig::from_toml_str("[kalman]\nblock_len = 64\nfft_len = 128\n").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)), "{e}");
        let e = PipelineConfig::from_toml_str("[bark]\nn_bands = 50\n").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid(_)), "{e}");
    }
}

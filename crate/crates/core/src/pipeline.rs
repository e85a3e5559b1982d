//! Streaming hybrid canceller: Kalman filter per block, neural post-filter per hop.

use std::path::Path;

use thiserror::Error;

pub use crate::config::PipelineConfig;
use crate::bark::{apply_mask, bark_log_power, gain_to_mask, BarkMatrix, FeatureAssembler, GainVector};
use crate::config::ConfigError;
use crate::dsp::{DspError, Stft, StreamingAnalyzer, StreamingSynthesizer};
use crate::linear_aec::{AecError, KalmanAec};
use crate::model::{forward_frame, ModelError, ModelParams, StreamState};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Aec(#[from] AecError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Replaces the network's gains, for debugging the DSP path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GainOverride {
    Constant(f64),
}

/// Signals captured for inspection while processing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Intermediates {
    /// Linear echo estimate ê, per sample.
    pub echo_est: Vec<f32>,
    /// Linear residual z = y − ê, per sample.
    pub residual: Vec<f32>,
    /// Band gains, `frames × bands`.
    pub gains: Vec<f32>,
    /// Bin masks, `frames × bins`.
    pub masks: Vec<f32>,
    pub bands: usize,
    pub bins: usize,
}

impl Intermediates {
    /// Raw little-endian f32 files plus a JSON sidecar describing them.
    pub fn write(&self, dir: &Path, sample_rate: u32, hop: usize, latency: usize) -> Result<(), PipelineError> {
        std::fs::create_dir_all(dir)?;
        let frames = self.gains.len() / self.bands.max(1);
        let items: [(&str, &[f32], Vec<usize>); 4] = [
            ("echo_est", &self.echo_est, vec![self.echo_est.len()]),
            ("residual", &self.residual, vec![self.residual.len()]),
            ("gains", &self.gains, vec![frames, self.bands]),
            ("masks", &self.masks, vec![frames, self.bins]),
        ];
        let mut files = Vec::new();
        for (name, data, shape) in items {
            let file = format!("{name}.f32");
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            std::fs::write(dir.join(&file), bytes)?;
            files.push(serde_json::json!({ "name": name, "file": file, "dtype": "f32le", "shape": shape }));
        }
        let sidecar = serde_json::json!({
            "sample_rate": sample_rate,
            "hop": hop,
            "latency_samples": latency,
            "files": files,
        });
        std::fs::write(dir.join("intermediates.json"), serde_json::to_string_pretty(&sidecar).expect("json"))?;
        Ok(())
    }
}

/// One far-end/microphone stream.
///
/// Input may arrive in chunks of any size; output is time-aligned with the
/// input and released as soon as it is final. [`finish`](Self::finish)
/// flushes the tail so the total output length equals the input length.
pub struct StreamingCanceller<T: Real> {
    params: ModelParams<T>,
    state: StreamState<T>,
    aec: KalmanAec<T>,
    bark: BarkMatrix<T>,
    ana_mic: StreamingAnalyzer<T>,
    ana_echo: StreamingAnalyzer<T>,
    synth: StreamingSynthesizer<T>,
    feat_mic: FeatureAssembler<T>,
    feat_echo: FeatureAssembler<T>,
    block: usize,
    hop: usize,
    /// Samples still to drop from the synthesizer (the analysis lead-in).
    skip: usize,
    pending_mic: Vec<T>,
    pending_far: Vec<T>,
    hop_mic: Vec<T>,
    hop_echo: Vec<T>,
    consumed: usize,
    emitted: usize,
    latency: usize,
    gain_override: Option<GainOverride>,
    dumps: Option<Intermediates>,
    synth_tail: usize,
    finished: bool,
}

impl<T: Real> StreamingCanceller<T> {
    pub fn new(cfg: &PipelineConfig, params: ModelParams<T>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        if params.config() != &cfg.model {
            return Err(PipelineError::Contract("weights were built for a different model config".into()));
        }
        let stft = Stft::new(cfg.stft_config::<T>()?)?;
        let hop = cfg.stft.hop;
        let lead = cfg.stft.win_len - hop;
        let mut ana_mic = StreamingAnalyzer::new(stft.clone());
        let mut ana_echo = StreamingAnalyzer::new(stft.clone());
        // Prime the analyzers so the first input sample sits mid-window.
        for _ in 0..lead / hop {
            ana_mic.push(&vec![T::zero(); hop]);
            ana_echo.push(&vec![T::zero(); hop]);
        }
        Ok(Self {
            state: StreamState::new(params.config())?,
            params,
            aec: KalmanAec::new(cfg.kalman_config()?)?,
            bark: cfg.bark_matrix(),
            ana_mic,
            ana_echo,
            synth: StreamingSynthesizer::new(stft),
            feat_mic: FeatureAssembler::new(),
            feat_echo: FeatureAssembler::new(),
            block: cfg.kalman.block_len,
            hop,
            skip: lead,
            pending_mic: Vec::new(),
            pending_far: Vec::new(),
            hop_mic: Vec::with_capacity(hop),
            hop_echo: Vec::with_capacity(hop),
            consumed: 0,
            emitted: 0,
            latency: cfg.latency_samples(),
            gain_override: None,
            dumps: None,
            synth_tail: cfg.stft.win_len - hop,
            finished: false,
        })
    }

    pub fn set_gain_override(&mut self, g: Option<GainOverride>) {
        self.gain_override = g;
    }

    pub fn enable_dumps(&mut self) {
        self.dumps = Some(Intermediates { bands: self.bark.n_bands(), bins: self.bark.n_bins(), ..Default::default() });
    }

    pub fn intermediates(&self) -> Option<&Intermediates> {
        self.dumps.as_ref()
    }

    /// Algorithmic latency in samples (analysis window plus one filter block).
    pub fn latency_samples(&self) -> usize {
        self.latency
    }

    /// Feed a chunk; returns samples that became final.
    pub fn process(&mut self, mic: &[T], far: &[T]) -> Result<Vec<T>, PipelineError> {
        if mic.len() != far.len() {
            return Err(PipelineError::Contract(format!("chunk lengths differ: mic {}, far {}", mic.len(), far.len())));
        }
        if self.finished {
            return Err(PipelineError::Contract("stream already finished".into()));
        }
        self.consumed += mic.len();
        let mut out = Vec::new();
        self.feed(mic, far, &mut out)?;
        Ok(out)
    }

    fn feed(&mut self, mic: &[T], far: &[T], out: &mut Vec<T>) -> Result<(), PipelineError> {
        self.pending_mic.extend_from_slice(mic);
        self.pending_far.extend_from_slice(far);
        let mut at = 0;
        while self.pending_mic.len() - at >= self.block {
            let (m, f) = (&self.pending_mic[at..at + self.block], &self.pending_far[at..at + self.block]);
            let lin = self.aec.process_block(f, m)?;
            if let Some(d) = &mut self.dumps {
                d.echo_est.extend(lin.echo_est.iter().map(|v| v.as_f64() as f32));
                d.residual.extend(lin.residual.iter().map(|v| v.as_f64() as f32));
            }
            self.hop_mic.extend_from_slice(m);
            self.hop_echo.extend_from_slice(&lin.echo_est);
            at += self.block;
            if self.hop_mic.len() == self.hop {
                self.run_hop(out)?;
            }
        }
        self.pending_mic.drain(..at);
        self.pending_far.drain(..at);
        Ok(())
    }

    fn run_hop(&mut self, out: &mut Vec<T>) -> Result<(), PipelineError> {
        let y = self.ana_mic.push(&self.hop_mic);
        let e = self.ana_echo.push(&self.hop_echo);
        self.hop_mic.clear();
        self.hop_echo.clear();
        let (Some(y), Some(e)) = (y, e) else { return Ok(()) };
        let fm = self.feat_mic.push(&bark_log_power(&y, &self.bark));
        let fe = self.feat_echo.push(&bark_log_power(&e, &self.bark));
        let gains = match self.gain_override {
            Some(GainOverride::Constant(g)) => {
                // keep the recurrent state in step even when overridden
                forward_frame(&self.params, &mut self.state, &fm, &fe)?;
                vec![T::lit(g); self.bark.n_bands()]
            }
            None => forward_frame(&self.params, &mut self.state, &fm, &fe)?,
        };
        let mask = gain_to_mask(&GainVector(gains.clone()), &self.bark);
        if let Some(d) = &mut self.dumps {
            d.gains.extend(gains.iter().map(|v| v.as_f64() as f32));
            d.masks.extend(mask.iter().map(|v| v.as_f64() as f32));
        }
        let samples = self.synth.push(&apply_mask(&mask, &y))?;
        self.release(samples, out);
        Ok(())
    }

    fn release(&mut self, samples: Vec<T>, out: &mut Vec<T>) {
        let drop = self.skip.min(samples.len());
        self.skip -= drop;
        let keep = samples.len() - drop;
        let room = (self.consumed - self.emitted).min(keep);
        out.extend_from_slice(&samples[drop..drop + room]);
        self.emitted += room;
    }

    /// Zero-pad the tail, flush, and return the remaining output samples.
    pub fn finish(&mut self) -> Result<Vec<T>, PipelineError> {
        if self.finished {
            return Ok(Vec::new());
        }
        self.finished = true;
        let total = self.consumed;
        let tail = self.synth_tail;
        let mut out = Vec::new();
        let zeros = vec![T::zero(); self.hop];
        // frames pushed so far cover `emitted + tail` samples once the lead-in is dropped
        while self.emitted + tail.saturating_sub(self.skip) < total {
            self.feed(&zeros, &zeros, &mut out)?;
        }
        let rest = self.synth.flush();
        self.release(rest, &mut out);
        if let Some(d) = &mut self.dumps {
            d.echo_est.truncate(total);
            d.residual.truncate(total);
        }
        Ok(out)
    }
}

/// Output of a whole-signal run.
#[derive(Debug, Clone)]
pub struct ProcessOutput<T> {
    pub output: Vec<T>,
    pub intermediates: Option<Intermediates>,
}

/// Process whole signals in `chunk`-sample pieces (whole file when `None`).
pub fn process_signals<T: Real>(
    cfg: &PipelineConfig,
    params: ModelParams<T>,
    mic: &[T],
    far: &[T],
    chunk: Option<usize>,
    gain_override: Option<GainOverride>,
    dump: bool,
) -> Result<ProcessOutput<T>, PipelineError> {
    if mic.len() != far.len() {
        return Err(PipelineError::Contract(format!("mic has {} samples, far {}", mic.len(), far.len())));
    }
    let mut c = StreamingCanceller::new(cfg, params)?;
    c.set_gain_override(gain_override);
    if dump {
        c.enable_dumps();
    }
    let step = chunk.unwrap_or(mic.len()).max(1);
    let mut output = Vec::with_capacity(mic.len());
    for (m, f) in mic.chunks(step).zip(far.chunks(step)) {
        output.extend(c.process(m, f)?);
    }
    output.extend(c.finish()?);
    Ok(ProcessOutput { output, intermediates: c.dumps.take() })
}

/// The linear stage alone: the Kalman residual `z`.
pub fn linear_only<T: Real>(cfg: &PipelineConfig, mic: &[T], far: &[T]) -> Result<Vec<T>, PipelineError> {
    let mut aec = KalmanAec::new(cfg.kalman_config()?)?;
    Ok(aec.process_signal(far, mic)?.residual)
}

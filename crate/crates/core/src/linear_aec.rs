//! Partitioned-block frequency-domain adaptive Kalman filter.
//!
//! The far-end signal is split into `P` partitions of `M = N/2` samples; each
//! partition has its own frequency-domain weight vector and a diagonal
//! (per-bin) state variance. The echo estimate uses overlap-save, and the
//! error is zero-padded before its FFT so the update only sees the linear part
//! of the circular correlation.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, PartialEq)]
pub enum AecError {
    #[error("invalid Kalman configuration: {0}")]
    Config(String),
    #[error("block has {got} samples, expected {expected}")]
    BlockLength { expected: usize, got: usize },
    #[error("non-finite {which} sample at index {index}")]
    SignalIntegrity { which: &'static str, index: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanConfig<T> {
    pub partitions: usize,
    pub fft_len: usize,
    pub block_len: usize,
    /// State transition factor `A` of the first-order Markov echo path model.
    pub transition_factor: T,
    pub process_noise_floor: T,
    /// Recursive smoothing factor for the observation noise PSD.
    pub psd_smoothing: T,
    pub initial_state_variance: T,
    pub divide_guard: T,
    /// Multiplier on the smoothed error PSD where it enters the gain denominator.
    pub observation_noise_scale: T,
    /// Fraction of `K·X` removed from the state variance per update (`M/N`
    /// accounts for the zero-padded half of the error window).
    pub variance_update_factor: T,
}

impl<T: Real> Default for KalmanConfig<T> {
    fn default() -> Self {
        Self {
            partitions: 10,
            fft_len: 256,
            block_len: 128,
            transition_factor: T::lit(0.999),
            process_noise_floor: T::lit(1e-10),
            psd_smoothing: T::lit(0.9),
            initial_state_variance: T::one(),
            divide_guard: T::lit(1e-10),
            observation_noise_scale: T::one(),
            variance_update_factor: T::lit(0.5),
        }
    }
}

impl<T: Real> KalmanConfig<T> {
    pub fn validate(&self) -> Result<(), AecError> {
        if self.partitions == 0 {
            return Err(AecError::Config("partitions must be >= 1".into()));
        }
        if self.fft_len != 2 * self.block_len || self.block_len == 0 {
            return Err(AecError::Config(format!(
                "fft_len {} must equal 2 * block_len {}",
                self.fft_len, self.block_len
            )));
        }
        let a = self.transition_factor;
        if !(a > T::zero() && a < T::one()) {
            return Err(AecError::Config(format!("transition_factor {a} outside (0, 1)")));
        }
        let s = self.psd_smoothing;
        if !(s > T::zero() && s < T::one()) {
            return Err(AecError::Config(format!("psd_smoothing {s} outside (0, 1)")));
        }
        if !(self.initial_state_variance >= T::zero()) || !(self.process_noise_floor >= T::zero()) {
            return Err(AecError::Config("variances must be nonnegative".into()));
        }
        if !(self.observation_noise_scale > T::zero()) {
            return Err(AecError::Config("observation_noise_scale must be > 0".into()));
        }
        let v = self.variance_update_factor;
        if !(v > T::zero() && v <= T::one()) {
            return Err(AecError::Config(format!("variance_update_factor {v} outside (0, 1]")));
        }
        Ok(())
    }

    /// Number of samples of echo path the filter can model (`P * M`).
    pub fn echo_path_span(&self) -> usize {
        self.partitions * self.block_len
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearAecBlockOut<T> {
    /// Echo estimate ê for the block.
    pub echo_est: Vec<T>,
    /// Residual z = y - ê.
    pub residual: Vec<T>,
}

/// Per-block diagnostics delivered to an optional trace callback.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub block_index: u64,
    pub erle_db: f64,
    pub weight_norm: f64,
}

type TraceFn = Box<dyn FnMut(&BlockTrace) + Send>;

/// Filter state for one stream.
pub struct KalmanAec<T: Real> {
    cfg: KalmanConfig<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
    /// `weights[p][k]`
    weights: Vec<Vec<Complex<T>>>,
    state_variance: Vec<Vec<T>>,
    /// Spectra of the last `P` two-block far-end windows, newest first.
    far_spectra: Vec<Vec<Complex<T>>>,
    prev_far_block: Vec<T>,
    noise_psd: Vec<T>,
    blocks: u64,
    trace: Option<TraceFn>,
}

impl<T: Real> Clone for KalmanAec<T> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            fwd: self.fwd.clone(),
            inv: self.inv.clone(),
            weights: self.weights.clone(),
            state_variance: self.state_variance.clone(),
            far_spectra: self.far_spectra.clone(),
            prev_far_block: self.prev_far_block.clone(),
            noise_psd: self.noise_psd.clone(),
            blocks: self.blocks,
            trace: None,
        }
    }
}

impl<T: Real> std::fmt::Debug for KalmanAec<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KalmanAec").field("cfg", &self.cfg).field("blocks", &self.blocks).finish()
    }
}

impl<T: Real> KalmanAec<T> {
    pub fn new(cfg: KalmanConfig<T>) -> Result<Self, AecError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(cfg.fft_len);
        let inv = planner.plan_fft_inverse(cfg.fft_len);
        let bins = cfg.bins();
        let zero = Complex::new(T::zero(), T::zero());
        Ok(Self {
            weights: vec![vec![zero; bins]; cfg.partitions],
            state_variance: vec![vec![cfg.initial_state_variance; bins]; cfg.partitions],
            far_spectra: vec![vec![zero; bins]; cfg.partitions],
            prev_far_block: vec![T::zero(); cfg.block_len],
            noise_psd: vec![T::zero(); bins],
            blocks: 0,
            trace: None,
            fwd,
            inv,
            cfg,
        })
    }

    pub fn config(&self) -> &KalmanConfig<T> {
        &self.cfg
    }

    pub fn weights(&self) -> &[Vec<Complex<T>>] {
        &self.weights
    }

    pub fn state_variance(&self) -> &[Vec<T>] {
        &self.state_variance
    }

    pub fn noise_psd(&self) -> &[T] {
        &self.noise_psd
    }

    pub fn blocks_processed(&self) -> u64 {
        self.blocks
    }

    pub fn set_trace(&mut self, f: impl FnMut(&BlockTrace) + Send + 'static) {
        self.trace = Some(Box::new(f));
    }

    pub fn weight_norm(&self) -> T {
        self.weights.iter().flatten().map(|w| w.norm_sqr()).sum::<T>().sqrt()
    }

    fn spectrum(&self, time: &[T]) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = time.iter().map(|&x| Complex::new(x, T::zero())).collect();
        self.fwd.process(&mut buf);
        buf.truncate(self.cfg.bins());
        buf
    }

    fn inverse(&self, half: &[Complex<T>]) -> Vec<T> {
        let n = self.cfg.fft_len;
        let bins = self.cfg.bins();
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        buf[..bins].copy_from_slice(half);
        buf[0].im = T::zero();
        buf[bins - 1].im = T::zero();
        for k in 1..n - bins + 1 {
            buf[n - k] = half[k].conj();
        }
        self.inv.process(&mut buf);
        let scale = T::one() / T::from_usize_lossy(n);
        buf.iter().map(|c| c.re * scale).collect()
    }

    /// Process one block of `M` far-end and microphone samples.
    pub fn process_block(&mut self, far_block: &[T], mic_block: &[T]) -> Result<LinearAecBlockOut<T>, AecError> {
        let m = self.cfg.block_len;
        for (which, block) in [("far-end", far_block), ("microphone", mic_block)] {
            if block.len() != m {
                return Err(AecError::BlockLength { expected: m, got: block.len() });
            }
            if let Some(index) = block.iter().position(|v| !v.is_finite()) {
                return Err(AecError::SignalIntegrity { which, index });
            }
        }

        let mut window = Vec::with_capacity(2 * m);
        window.extend_from_slice(&self.prev_far_block);
        window.extend_from_slice(far_block);
        let newest = self.spectrum(&window);
        self.far_spectra.rotate_right(1);
        self.far_spectra[0] = newest;
        self.prev_far_block.copy_from_slice(far_block);

        let bins = self.cfg.bins();
        let parts = self.cfg.partitions;

        // (i) overlap-save echo estimate
        let mut echo_spec = vec![Complex::new(T::zero(), T::zero()); bins];
        for p in 0..parts {
            for k in 0..bins {
                echo_spec[k] += self.far_spectra[p][k] * self.weights[p][k];
            }
        }
        let echo_time = self.inverse(&echo_spec);
        let echo_est: Vec<T> = echo_time[m..].to_vec();
        let residual: Vec<T> = mic_block.iter().zip(&echo_est).map(|(&y, &e)| y - e).collect();

        // (ii) error spectrum of the zero-padded residual
        let mut padded = vec![T::zero(); m];
        padded.extend_from_slice(&residual);
        let err_spec = self.spectrum(&padded);

        // (iii)-(v) Kalman gain, weight and variance updates
        let a2 = self.cfg.transition_factor * self.cfg.transition_factor;
        let one = T::one();
        for k in 0..bins {
            let mut denom = self.cfg.observation_noise_scale * self.noise_psd[k] + self.cfg.divide_guard;
            for p in 0..parts {
                denom += self.far_spectra[p][k].norm_sqr() * self.state_variance[p][k];
            }
            for p in 0..parts {
                let x = self.far_spectra[p][k];
                let pv = self.state_variance[p][k];
                let gain = x.conj() * (pv / denom);
                self.weights[p][k] += gain * err_spec[k];
                let reduction = one - self.cfg.variance_update_factor * pv * x.norm_sqr() / denom;
                let w2 = self.weights[p][k].norm_sqr();
                self.state_variance[p][k] = a2 * reduction * pv + (one - a2) * w2 + self.cfg.process_noise_floor;
            }
        }

        // (vi) observation noise PSD
        let lambda = self.cfg.psd_smoothing;
        for k in 0..bins {
            self.noise_psd[k] = lambda * self.noise_psd[k] + (one - lambda) * err_spec[k].norm_sqr();
        }

        if let Some(trace) = self.trace.as_mut() {
            let pm: f64 = mic_block.iter().map(|v| v.as_f64().powi(2)).sum();
            let pr: f64 = residual.iter().map(|v| v.as_f64().powi(2)).sum();
            let weight_norm = self
                .weights
                .iter()
                .flatten()
                .map(|w| w.norm_sqr().as_f64())
                .sum::<f64>()
                .sqrt();
            trace(&BlockTrace { block_index: self.blocks, erle_db: erle_ratio_db(pm, pr), weight_norm });
        }
        self.blocks += 1;
        Ok(LinearAecBlockOut { echo_est, residual })
    }

    /// Run a whole signal through the filter, block by block. The tail that does
    /// not fill a block is processed zero-padded and truncated.
    pub fn process_signal(&mut self, far: &[T], mic: &[T]) -> Result<LinearAecBlockOut<T>, AecError> {
        let m = self.cfg.block_len;
        let len = far.len().max(mic.len());
        let mut echo = Vec::with_capacity(len + m);
        let mut resid = Vec::with_capacity(len + m);
        let mut fb = vec![T::zero(); m];
        let mut mb = vec![T::zero(); m];
        for start in (0..len).step_by(m) {
            for i in 0..m {
                fb[i] = far.get(start + i).copied().unwrap_or(T::zero());
                mb[i] = mic.get(start + i).copied().unwrap_or(T::zero());
            }
            let out = self.process_block(&fb, &mb)?;
            echo.extend(out.echo_est);
            resid.extend(out.residual);
        }
        echo.truncate(len);
        resid.truncate(len);
        Ok(LinearAecBlockOut { echo_est: echo, residual: resid })
    }
}

/// Cap applied to ERLE values.
pub const ERLE_CAP_DB: f64 = 80.0;

fn erle_ratio_db(p_mic: f64, p_res: f64) -> f64 {
    if p_res <= 0.0 || p_mic <= 0.0 {
        return ERLE_CAP_DB;
    }
    (10.0 * (p_mic / p_res).log10()).min(ERLE_CAP_DB)
}

/// Windowed ERLE `10 log10(P_mic / P_residual)` in dB, capped at +80 dB.
/// Windows with zero residual or zero microphone power report the cap.
pub fn erle<T: Real>(mic: &[T], residual: &[T], window_s: f64) -> Result<Vec<f64>, AecError> {
    if mic.len() != residual.len() {
        return Err(AecError::BlockLength { expected: mic.len(), got: residual.len() });
    }
    let win = ((window_s * crate::SAMPLE_RATE as f64).round() as usize).max(1);
    Ok(mic
        .chunks(win)
        .zip(residual.chunks(win))
        .map(|(m, r)| {
            let pm: f64 = m.iter().map(|v| v.as_f64().powi(2)).sum();
            let pr: f64 = r.iter().map(|v| v.as_f64().powi(2)).sum();
            erle_ratio_db(pm, pr)
        })
        .collect())
}

/// ERLE over a whole segment as a single value.
pub fn erle_total<T: Real>(mic: &[T], residual: &[T]) -> f64 {
    let pm: f64 = mic.iter().map(|v| v.as_f64().powi(2)).sum();
    let pr: f64 = residual.iter().map(|v| v.as_f64().powi(2)).sum();
    erle_ratio_db(pm, pr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn white(len: usize, seed: u64, sigma: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, sigma).unwrap();
        (0..len).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn config_validation() {
        let cfg = KalmanConfig::<f64>::default();
        assert_eq!(cfg.echo_path_span(), 1280);
        assert_eq!(cfg.echo_path_span() as f64 / 16.0, 80.0);
        let bad = KalmanConfig { transition_factor: 1.2, ..cfg.clone() };
        assert!(matches!(KalmanAec::new(bad), Err(AecError::Config(_))));
        let bad = KalmanConfig { fft_len: 200, ..cfg };
        assert!(KalmanAec::new(bad).is_err());
    }

    #[test]
    fn first_block_estimate_is_zero_and_zero_far_end_passes_through() {
        let mut aec = KalmanAec::<f64>::new(KalmanConfig::default()).unwrap();
        let mic = white(128 * 50, 1, 0.3);
        let far = vec![0.0; 128];
        for (i, mb) in mic.chunks(128).enumerate() {
            let out = aec.process_block(&far, mb).unwrap();
            assert!(out.echo_est.iter().all(|&v| v == 0.0), "block {i}");
            assert_eq!(out.residual, mb);
        }
        assert_eq!(aec.weight_norm(), 0.0);
    }

    #[test]
    fn rejects_bad_blocks_without_advancing() {
        let mut aec = KalmanAec::<f64>::new(KalmanConfig::default()).unwrap();
        assert!(matches!(aec.process_block(&[0.0; 64], &[0.0; 128]), Err(AecError::BlockLength { .. })));
        let mut far = vec![0.1; 128];
        far[5] = f64::NAN;
        assert_eq!(
            aec.process_block(&far, &vec![0.0; 128]),
            Err(AecError::SignalIntegrity { which: "far-end", index: 5 })
        );
        assert_eq!(aec.blocks_processed(), 0);
    }

    #[test]
    fn converges_on_pure_delay() {
        let n = 16000 * 10;
        let far = white(n, 7, 0.3);
        let mic: Vec<f64> = (0..n).map(|i| if i >= 32 { 0.5 * far[i - 32] } else { 0.0 }).collect();
        let mut aec = KalmanAec::new(KalmanConfig::default()).unwrap();
        let out = aec.process_signal(&far, &mic).unwrap();
        let tail = n - 16000;
        let e = erle_total(&mic[tail..], &out.residual[tail..]);
        assert!(e >= 20.0, "final-second ERLE {e:.1} dB");
    }

    #[test]
    fn deterministic_and_trace_reports() {
        let far = white(128 * 40, 2, 0.3);
        let mic: Vec<f64> = far.iter().map(|v| v * 0.3).collect();
        let mut a = KalmanAec::new(KalmanConfig::default()).unwrap();
        let mut b = KalmanAec::new(KalmanConfig::default()).unwrap();
        let count = std::sync::Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c2 = count.clone();
        b.set_trace(move |t| {
            assert!(t.weight_norm.is_finite());
            c2.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        });
        let oa = a.process_signal(&far, &mic).unwrap();
        let ob = b.process_signal(&far, &mic).unwrap();
        assert_eq!(oa, ob);
        assert_eq!(a.weights(), b.weights());
        assert_eq!(count.load(std::sync::atomic::Ordering::Relaxed), 40);
    }

    #[test]
    fn causal_outputs() {
        let far = white(128 * 30, 4, 0.3);
        let mic: Vec<f64> = far.iter().map(|v| v * 0.4).collect();
        let mut far2 = far.clone();
        let mut mic2 = mic.clone();
        for i in 128 * 20..128 * 30 {
            far2[i] = 0.0;
            mic2[i] = 1.0;
        }
        let a = KalmanAec::new(KalmanConfig::default()).unwrap().process_signal(&far, &mic).unwrap();
        let b = KalmanAec::new(KalmanConfig::default()).unwrap().process_signal(&far2, &mic2).unwrap();
        assert_eq!(a.residual[..128 * 20], b.residual[..128 * 20]);
    }

    #[test]
    fn erle_examples() {
        let mic = white(32000, 3, 0.2);
        assert!(erle(&mic, &mic, 0.5).unwrap().iter().all(|&v| v.abs() < 1e-12));
        let tenth: Vec<f64> = mic.iter().map(|v| v / 10.0).collect();
        assert!(erle(&mic, &tenth, 0.5).unwrap().iter().all(|&v| (v - 20.0).abs() < 1e-9));
        assert_eq!(erle(&mic, &vec![0.0; 32000], 1.0).unwrap(), vec![80.0, 80.0]);
        assert!(erle(&mic, &mic[..10], 1.0).is_err());
    }

    #[test]
    fn f32_filter_converges_too() {
        let n = 16000 * 8;
        let far: Vec<f32> = white(n, 8, 0.3).into_iter().map(|v| v as f32).collect();
        let mic: Vec<f32> = (0..n).map(|i| if i >= 40 { 0.5 * far[i - 40] } else { 0.0 }).collect();
        let mut aec = KalmanAec::<f32>::new(KalmanConfig::default()).unwrap();
        let out = aec.process_signal(&far, &mic).unwrap();
        let e = erle_total(&mic[n - 16000..], &out.residual[n - 16000..]);
        assert!(e >= 20.0, "{e}");
    }
}

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioBuffer, DspError};
use crate::scalar::Real;

/// Analysis/synthesis parameters. The window is applied at both ends (WOLA).
#[derive(Debug, Clone, PartialEq)]
pub struct StftConfig<T> {
    pub win_len: usize,
    pub hop: usize,
    pub fft_len: usize,
    pub window: Vec<T>,
}

impl<T: Real> StftConfig<T> {
    /// Periodic Hann window of `win_len` samples.
    pub fn new(win_len: usize, hop: usize, fft_len: usize) -> Result<Self, DspError> {
        let n = T::from_usize_lossy(win_len);
        let window = (0..win_len)
            .map(|i| {
                let s = (T::PI() * T::from_usize_lossy(i) / n).sin();
                s * s
            })
            .collect();
        let cfg = Self { win_len, hop, fft_len, window };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), DspError> {
        if self.win_len == 0 || self.hop == 0 {
            return Err(DspError::InvalidConfig("win_len and hop must be positive".into()));
        }
        if self.fft_len < self.win_len {
            return Err(DspError::InvalidConfig(format!(
                "fft_len {} shorter than win_len {}",
                self.fft_len, self.win_len
            )));
        }
        if self.win_len % self.hop != 0 {
            return Err(DspError::InvalidConfig(format!(
                "hop {} does not divide win_len {}",
                self.hop, self.win_len
            )));
        }
        if self.window.len() != self.win_len {
            return Err(DspError::InvalidConfig("window length differs from win_len".into()));
        }
        Ok(())
    }

    pub fn n_bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.win_len {
            0
        } else {
            (len - self.win_len) / self.hop + 1
        }
    }
}

impl<T: Real> Default for StftConfig<T> {
    fn default() -> Self {
        Self::new(512, 256, 512).expect("default STFT config is valid")
    }
}

/// One-sided spectrum of a single frame (`fft_len / 2 + 1` bins).
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumFrame<T>(pub Vec<Complex<T>>);

impl<T: Real> SpectrumFrame<T> {
    pub fn zeros(n_bins: usize) -> Self {
        Self(vec![Complex::new(T::zero(), T::zero()); n_bins])
    }

    pub fn bins(&self) -> &[Complex<T>] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// |X_k|^2 for every bin.
    pub fn power(&self) -> Vec<T> {
        self.0.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn magnitude(&self) -> Vec<T> {
        self.0.iter().map(|c| c.norm()).collect()
    }
}

/// Planned STFT engine. Cheap to clone; FFT plans are shared.
#[derive(Clone)]
pub struct Stft<T: Real> {
    cfg: StftConfig<T>,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Stft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft").field("cfg", &self.cfg).finish()
    }
}

impl<T: Real> Stft<T> {
    pub fn new(cfg: StftConfig<T>) -> Result<Self, DspError> {
        cfg.validate()?;
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(cfg.fft_len);
        let inv = planner.plan_fft_inverse(cfg.fft_len);
        Ok(Self { cfg, fwd, inv })
    }

    pub fn config(&self) -> &StftConfig<T> {
        &self.cfg
    }

    /// Transform one windowed frame starting at `frame[0]` (`win_len` samples).
    pub fn analyze_frame(&self, frame: &[T]) -> SpectrumFrame<T> {
        let n = self.cfg.fft_len;
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&self.cfg.window) {
            b.re = x * w;
        }
        self.fwd.process(&mut buf);
        buf.truncate(self.cfg.n_bins());
        // Real input: DC and Nyquist are real up to rounding.
        buf[0].im = T::zero();
        if n % 2 == 0 {
            let last = buf.len() - 1;
            buf[last].im = T::zero();
        }
        SpectrumFrame(buf)
    }

    /// Inverse transform of one frame, multiplied by the synthesis window.
    pub fn synthesize_frame(&self, frame: &SpectrumFrame<T>) -> Result<Vec<T>, DspError> {
        let n = self.cfg.fft_len;
        let bins = self.cfg.n_bins();
        if frame.len() != bins {
            return Err(DspError::FrameLength { expected: bins, got: frame.len() });
        }
        let mut buf = vec![Complex::new(T::zero(), T::zero()); n];
        buf[..bins].copy_from_slice(&frame.0);
        for k in 1..n - bins + 1 {
            buf[n - k] = frame.0[k].conj();
        }
        self.inv.process(&mut buf);
        let scale = T::one() / T::from_usize_lossy(n);
        Ok(buf[..self.cfg.win_len]
            .iter()
            .zip(&self.cfg.window)
            .map(|(c, &w)| c.re * scale * w)
            .collect())
    }

    pub fn analyze(&self, signal: &[T]) -> Result<Vec<SpectrumFrame<T>>, DspError> {
        if signal.len() < self.cfg.win_len {
            return Err(DspError::EmptyInput("signal shorter than one window"));
        }
        let count = self.cfg.frame_count(signal.len());
        Ok((0..count)
            .map(|t| {
                let start = t * self.cfg.hop;
                self.analyze_frame(&signal[start..start + self.cfg.win_len])
            })
            .collect())
    }

    /// Weighted overlap-add. Output length is `(frames - 1) * hop + win_len`.
    pub fn synthesize(&self, frames: &[SpectrumFrame<T>]) -> Result<Vec<T>, DspError> {
        if frames.is_empty() {
            return Err(DspError::EmptyInput("no frames to synthesize"));
        }
        let mut synth = StreamingSynthesizer::new(self.clone());
        let mut out = Vec::with_capacity((frames.len() - 1) * self.cfg.hop + self.cfg.win_len);
        for frame in frames {
            out.extend(synth.push(frame)?);
        }
        out.extend(synth.flush());
        Ok(out)
    }
}

/// Offline STFT of a buffer.
pub fn stft<T: Real>(signal: &AudioBuffer<T>, cfg: &StftConfig<T>) -> Result<Vec<SpectrumFrame<T>>, DspError> {
    Stft::new(cfg.clone())?.analyze(signal.samples())
}

/// Offline inverse STFT.
pub fn istft<T: Real>(frames: &[SpectrumFrame<T>], cfg: &StftConfig<T>) -> Result<AudioBuffer<T>, DspError> {
    let samples = Stft::new(cfg.clone())?.synthesize(frames)?;
    AudioBuffer::new(samples)
}

/// Emits one frame per `hop` samples once a full window has been seen.
#[derive(Debug, Clone)]
pub struct StreamingAnalyzer<T: Real> {
    stft: Stft<T>,
    buf: Vec<T>,
}

impl<T: Real> StreamingAnalyzer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        Self { stft, buf: Vec::new() }
    }

    /// Feed exactly `hop` samples.
    pub fn push(&mut self, hop_block: &[T]) -> Option<SpectrumFrame<T>> {
        let cfg = self.stft.config();
        debug_assert_eq!(hop_block.len(), cfg.hop);
        self.buf.extend_from_slice(hop_block);
        if self.buf.len() < cfg.win_len {
            return None;
        }
        let frame = self.stft.analyze_frame(&self.buf[..cfg.win_len]);
        let hop = cfg.hop;
        self.buf.drain(..hop);
        Some(frame)
    }

    pub fn reset(&mut self) {
        self.buf.clear();
    }
}

/// Streaming WOLA synthesis with window-energy normalization.
///
/// After frame `t` is pushed, samples `[t*hop, (t+1)*hop)` are final and
/// returned. `flush` releases the remaining `win_len - hop` samples.
#[derive(Debug, Clone)]
pub struct StreamingSynthesizer<T: Real> {
    stft: Stft<T>,
    acc: Vec<T>,
    env: Vec<T>,
}

impl<T: Real> StreamingSynthesizer<T> {
    pub fn new(stft: Stft<T>) -> Self {
        let w = stft.config().win_len;
        Self { stft, acc: vec![T::zero(); w], env: vec![T::zero(); w] }
    }

    pub fn push(&mut self, frame: &SpectrumFrame<T>) -> Result<Vec<T>, DspError> {
        let y = self.stft.synthesize_frame(frame)?;
        let cfg = self.stft.config();
        for i in 0..cfg.win_len {
            self.acc[i] += y[i];
            self.env[i] += cfg.window[i] * cfg.window[i];
        }
        let hop = cfg.hop;
        let out: Vec<T> = (0..hop).map(|i| normalize(self.acc[i], self.env[i])).collect();
        self.acc.drain(..hop);
        self.env.drain(..hop);
        self.acc.extend(std::iter::repeat(T::zero()).take(hop));
        self.env.extend(std::iter::repeat(T::zero()).take(hop));
        Ok(out)
    }

    pub fn flush(&mut self) -> Vec<T> {
        let tail = self.stft.config().win_len - self.stft.config().hop;
        let out = (0..tail).map(|i| normalize(self.acc[i], self.env[i])).collect();
        self.acc.iter_mut().for_each(|v| *v = T::zero());
        self.env.iter_mut().for_each(|v| *v = T::zero());
        out
    }
}

#[inline]
fn normalize<T: Real>(acc: T, env: T) -> T {
    if env > T::lit(1e-12) {
        acc / env
    } else {
        T::zero()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn engine() -> Stft<f64> {
        Stft::new(StftConfig::default()).unwrap()
    }

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Direct O(N^2) DFT of the windowed frame.
    fn dft_oracle(frame: &[f64], window: &[f64], n_fft: usize) -> Vec<Complex<f64>> {
        (0..n_fft / 2 + 1)
            .map(|k| {
                let mut acc = Complex::new(0.0, 0.0);
                for (n, (&x, &w)) in frame.iter().zip(window).enumerate() {
                    let ph = -2.0 * std::f64::consts::PI * (k * n) as f64 / n_fft as f64;
                    acc += Complex::new(ph.cos(), ph.sin()) * x * w;
                }
                acc
            })
            .collect()
    }

    #[test]
    fn frame_count_and_short_input() {
        let s = engine();
        assert_eq!(s.analyze(&vec![0.0; 16000]).unwrap().len(), (16000 - 512) / 256 + 1);
        assert!(matches!(s.analyze(&[0.0; 100]), Err(DspError::EmptyInput(_))));
        assert!(matches!(s.synthesize(&[]), Err(DspError::EmptyInput(_))));
    }

    #[test]
    fn zero_signal_gives_zero_frames() {
        let frames = engine().analyze(&vec![0.0; 16000]).unwrap();
        assert!(frames.iter().all(|f| f.0.iter().all(|c| c.norm() == 0.0)));
    }

    #[test]
    fn impulse_magnitude_is_flat() {
        let s = engine();
        for pos in [0usize, 7, 100, 256] {
            let mut x = vec![0.0; 1024];
            x[pos] = 1.0;
            let f0 = &s.analyze(&x).unwrap()[0];
            let oracle = dft_oracle(&x[..512], &s.config().window, 512);
            let w = s.config().window[pos];
            for (a, b) in f0.0.iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-12);
                assert!((a.norm() - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sine_peaks_at_bin_32() {
        let x: Vec<f64> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let s = engine();
        let frames = s.analyze(&x).unwrap();
        for (t, f) in frames.iter().enumerate() {
            let mag = f.magnitude();
            let argmax = (0..mag.len()).max_by(|&a, &b| mag[a].total_cmp(&mag[b])).unwrap();
            assert_eq!(argmax, 32, "frame {t}");
            let oracle = dft_oracle(&x[t * 256..t * 256 + 512], &s.config().window, 512);
            assert!((mag[32] - oracle[32].norm()).abs() < 1e-9);
        }
    }

    #[test]
    fn dc_and_nyquist_are_real() {
        let frames = engine().analyze(&noise(4096, 3)).unwrap();
        for f in frames {
            assert_eq!(f.0[0].im, 0.0);
            assert_eq!(f.0[256].im, 0.0);
        }
    }

    #[test]
    fn round_trip_white_noise_and_sine() {
        let s = engine();
        let x = noise(16000, 11);
        let y = s.synthesize(&s.analyze(&x).unwrap()).unwrap();
        let err = (512..16000 - 512).map(|i| (x[i] - y[i]).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "max err {err}");

        let sine: Vec<f64> = (0..16000)
            .map(|n| (2.0 * std::f64::consts::PI * 1000.0 * n as f64 / 16000.0).sin())
            .collect();
        let y = s.synthesize(&s.analyze(&sine).unwrap()).unwrap();
        let err = (512..16000 - 512).map(|i| (sine[i] - y[i]).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-6, "max err {err}");
    }

    #[test]
    fn single_zero_frame_synthesizes_512_zeros() {
        let out = engine().synthesize(&[SpectrumFrame::zeros(257)]).unwrap();
        assert_eq!(out.len(), 512);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parseval_matches_windowed_energy() {
        let s = engine();
        let x = noise(2048, 5);
        for (t, f) in s.analyze(&x).unwrap().iter().enumerate() {
            let time: f64 = (0..512).map(|i| (x[t * 256 + i] * s.config().window[i]).powi(2)).sum();
            // One-sided spectrum: interior bins count twice.
            let p = f.power();
            let freq = (p[0] + p[256] + 2.0 * p[1..256].iter().sum::<f64>()) / 512.0;
            assert!((time - freq).abs() <= 1e-6 * time);
        }
    }

    #[test]
    fn streaming_analyzer_matches_offline() {
        let s = engine();
        let x = noise(8192, 9);
        let offline = s.analyze(&x).unwrap();
        let mut an = StreamingAnalyzer::new(s.clone());
        let streamed: Vec<_> = x.chunks(256).filter_map(|c| an.push(c)).collect();
        assert_eq!(offline, streamed);
    }

    #[test]
    fn bad_config_rejected() {
        assert!(StftConfig::<f64>::new(512, 200, 512).is_err());
        assert!(StftConfig::<f64>::new(512, 256, 256).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn round_trip_any_signal(seed in any::<u64>(), extra in 0usize..700) {
            let s = engine();
            let len = 3 * 512 + extra;
            let x = noise(len, seed);
            let y = s.synthesize(&s.analyze(&x).unwrap()).unwrap();
            for i in 512..len - 512 {
                prop_assert!((x[i] - y[i]).abs() <= 1e-6);
            }
        }

        #[test]
        fn linearity(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let s = engine();
            let x = noise(1536, seed);
            let y = noise(1536, seed.wrapping_add(1));
            let mix: Vec<f64> = x.iter().zip(&y).map(|(p, q)| a * p + b * q).collect();
            let (fx, fy, fm) = (s.analyze(&x).unwrap(), s.analyze(&y).unwrap(), s.analyze(&mix).unwrap());
            for t in 0..fm.len() {
                for k in 0..257 {
                    let expect = fx[t].0[k] * a + fy[t].0[k] * b;
                    let scale = fx[t].0[k].norm() * a.abs() + fy[t].0[k].norm() * b.abs() + 1e-12;
                    prop_assert!((fm[t].0[k] - expect).norm() <= 1e-9 * scale.max(1.0));
                }
            }
        }
    }
}

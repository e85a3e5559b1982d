//! Training-data simulation: (near-end, far-end, echo, microphone) quadruples.
//!
//! The echo path is a memoryless saturation followed by a synthetic room
//! response and a bulk delay; the near-end talker gets its own room response.
//! Everything is drawn from a ChaCha stream seeded per sample, so datasets are
//! reproducible and independent of generation order.

use std::path::{Path, PathBuf};

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsp::wav::{read_wav, write_wav, WavEncoding, WavError};
use crate::dsp::AudioBuffer;
use crate::SAMPLE_RATE;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    /// The far-end clip carries no signal; draw another one.
    #[error("far-end clip is silent")]
    SilentFarEnd,
    #[error("no usable source clips in {0}")]
    NoSources(String),
    #[error(transparent)]
    Wav(#[from] WavError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

/// Frames below `peak − 40 dB` do not count towards active power.
pub const ACTIVE_FLOOR_DB: f64 = 40.0;
/// Frame length used when locating active regions.
pub const ACTIVE_FRAME: usize = 256;
/// Target active RMS of the near-end signal (about −26 dBFS).
const NEAR_RMS: f64 = 0.05;
/// Upper bound on |mic| after level normalization.
const PEAK_LIMIT: f64 = 0.99;
const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub ser_db_range: [f64; 2],
    pub delay_ms_range: [f64; 2],
    /// Room response length in samples.
    pub rir_len: usize,
    pub rt60_range: [f64; 2],
    pub clip_threshold_range: [f64; 2],
    pub saturation_drive_range: [f64; 2],
    pub farend_only_prob: f64,
    pub seed: u64,
    /// Measured room responses (mono 16 kHz WAVs) used instead of synthetic ones.
    pub rir_dir: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ser_db_range: [-15.0, 15.0],
            delay_ms_range: [10.0, 512.0],
            rir_len: 4096,
            rt60_range: [0.2, 0.6],
            clip_threshold_range: [0.6, 1.0],
            saturation_drive_range: [0.5, 4.0],
            farend_only_prob: 0.10,
            seed: 0,
            rir_dir: None,
        }
    }
}

impl SimConfig {
    /// Delay capped at 40 ms and a 40 ms room, so the whole echo path fits
    /// the linear filter's 80 ms span.
    pub fn desk() -> Self {
        Self { delay_ms_range: [10.0, 40.0], rir_len: 640, rt60_range: [0.1, 0.3], ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let ranges = [
            ("ser_db_range", self.ser_db_range),
            ("delay_ms_range", self.delay_ms_range),
            ("rt60_range", self.rt60_range),
            ("clip_threshold_range", self.clip_threshold_range),
            ("saturation_drive_range", self.saturation_drive_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return bad(format!("{name} must be a finite, ordered pair, got [{lo}, {hi}]"));
            }
        }
        if self.delay_ms_range[0] < 0.0 {
            return bad("delay_ms_range must be non-negative".into());
        }
        if self.rt60_range[0] <= 0.0 || self.saturation_drive_range[0] <= 0.0 || self.clip_threshold_range[0] <= 0.0 {
            return bad("rt60, drive and clip threshold must be > 0".into());
        }
        if self.rir_len == 0 {
            return bad("rir_len must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.farend_only_prob) {
            return bad(format!("farend_only_prob must lie in [0, 1], got {}", self.farend_only_prob));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    DoubleTalk,
    FarendOnly,
    NearendOnly,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::DoubleTalk => "double_talk",
            Scenario::FarendOnly => "farend_only",
            Scenario::NearendOnly => "nearend_only",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimMeta {
    pub ser_db: f64,
    pub delay_ms: f64,
    pub scenario: Scenario,
}

/// `mic == near + echo` sample for sample; `near` is the reverberant talker.
#[derive(Debug, Clone, PartialEq)]
pub struct SimSample {
    pub near: AudioBuffer<f64>,
    pub far: AudioBuffer<f64>,
    pub echo: AudioBuffer<f64>,
    pub mic: AudioBuffer<f64>,
    pub meta: SimMeta,
}

/// Ratio of the RIR envelope to its onset value, `t` seconds after onset.
pub fn rir_envelope(rt60: f64, t: f64) -> f64 {
    (-(1000f64.ln()) * t / rt60).exp()
}

/// Exponentially decaying noise with a unit direct-path tap, peak-normalized.
pub fn gen_rir(seed: u64, rt60: f64, length: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = vec![0.0; length];
    if length == 0 {
        return h;
    }
    let onset = rng.gen_range(0..=(length / 16).min(16));
    h[onset] = 1.0;
    for (n, v) in h.iter_mut().enumerate().skip(onset + 1) {
        let g: f64 = StandardNormal.sample(&mut rng);
        *v = g * rir_envelope(rt60.max(1e-6), (n - onset) as f64 / SAMPLE_RATE as f64);
    }
    let peak = h.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    h.iter_mut().for_each(|v| *v /= peak);
    h
}

fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// `clamp(atan(drive·x)/atan(drive), ±clip)`, rescaled to the input RMS.
pub fn nonlinear_distort(x: &[f64], drive: f64, clip_threshold: f64) -> Vec<f64> {
    let norm = drive.atan();
    let mut y: Vec<f64> = x.iter().map(|&v| ((drive * v).atan() / norm).clamp(-clip_threshold, clip_threshold)).collect();
    let (rx, ry) = (rms(x), rms(&y));
    if ry > 0.0 {
        y.iter_mut().for_each(|v| *v *= rx / ry);
    }
    y
}

/// Linear convolution truncated to `x.len()` samples.
pub fn convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    if x.is_empty() || h.is_empty() {
        return vec![0.0; x.len()];
    }
    if h.len() <= 32 {
        return (0..x.len())
            .map(|n| h.iter().enumerate().take(n + 1).map(|(k, &c)| c * x[n - k]).sum())
            .collect();
    }
    let n = (x.len() + h.len() - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(n), planner.plan_fft_inverse(n));
    let pad = |s: &[f64]| {
        let mut v: Vec<Complex<f64>> = s.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(n, Complex::new(0.0, 0.0));
        v
    };
    let (mut a, mut b) = (pad(x), pad(h));
    fwd.process(&mut a);
    fwd.process(&mut b);
    a.iter_mut().zip(&b).for_each(|(p, q)| *p *= q);
    inv.process(&mut a);
    a[..x.len()].iter().map(|c| c.re / n as f64).collect()
}

/// Mean power over frames whose energy exceeds `peak − 40 dB`; 0 for silence.
pub fn active_power(x: &[f64]) -> f64 {
    let energies: Vec<f64> = x.chunks(ACTIVE_FRAME).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return 0.0;
    }
    let floor = peak * 10f64.powf(-ACTIVE_FLOOR_DB / 10.0);
    let (mut e, mut n) = (0.0, 0usize);
    for (c, &en) in x.chunks(ACTIVE_FRAME).zip(&energies) {
        if en > floor {
            e += en;
            n += c.len();
        }
    }
    e / n as f64
}

/// `10·log10(P_a(near) / P_a(echo))` on each signal's active region.
pub fn measured_ser_db(near: &[f64], echo: &[f64]) -> f64 {
    10.0 * (active_power(near) / active_power(echo)).log10()
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

/// A room response: a random file from `rir_dir` when configured, else synthetic.
fn room(rng: &mut ChaCha8Rng, cfg: &SimConfig, bank: &[Vec<f64>]) -> Vec<f64> {
    let rt60 = draw(rng, cfg.rt60_range);
    let seed = rng.gen();
    if bank.is_empty() {
        gen_rir(seed, rt60, cfg.rir_len)
    } else {
        bank[(seed % bank.len() as u64) as usize].clone()
    }
}

/// Combine two source clips into one simulated sample.
pub fn mix(near: &[f64], far: &[f64], cfg: &SimConfig, seed: u64) -> Result<SimSample, SimError> {
    mix_with_bank(near, far, cfg, seed, &[])
}

fn mix_with_bank(near: &[f64], far: &[f64], cfg: &SimConfig, seed: u64, bank: &[Vec<f64>]) -> Result<SimSample, SimError> {
    cfg.validate()?;
    if near.len() != far.len() || near.is_empty() {
        return Err(SimError::Contract(format!("clip lengths {} and {} must be equal and non-zero", near.len(), far.len())));
    }
    if active_power(far) <= 1e-12 {
        return Err(SimError::SilentFarEnd);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ser_db = draw(&mut rng, cfg.ser_db_range);
    let delay_ms = draw(&mut rng, cfg.delay_ms_range);
    let drive = draw(&mut rng, cfg.saturation_drive_range);
    let clip = draw(&mut rng, cfg.clip_threshold_range);
    let farend_only = rng.gen_bool(cfg.farend_only_prob);
    let rir_far = room(&mut rng, cfg, bank);
    let rir_near = room(&mut rng, cfg, bank);

    let len = far.len();
    let d = (delay_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize;
    let path = convolve(&nonlinear_distort(far, drive, clip), &rir_far);
    let mut echo = vec![0.0; len];
    if d < len {
        echo[d..].copy_from_slice(&path[..len - d]);
    }
    let mut near_r = convolve(near, &rir_near);

    let (pn, pe) = (active_power(&near_r), active_power(&echo));
    if pe <= 0.0 {
        return Err(SimError::SilentFarEnd);
    }
    let (gn, ge) = if pn > 0.0 {
        let gn = NEAR_RMS / pn.sqrt();
        (gn, gn * (pn / (pe * 10f64.powf(ser_db / 10.0))).sqrt())
    } else {
        (0.0, NEAR_RMS / pe.sqrt())
    };
    near_r.iter_mut().for_each(|v| *v *= gn);
    echo.iter_mut().for_each(|v| *v *= ge);
    let scenario = if farend_only || pn <= 0.0 {
        near_r.fill(0.0);
        Scenario::FarendOnly
    } else {
        Scenario::DoubleTalk
    };
    let peak = near_r.iter().zip(&echo).fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
    if peak > PEAK_LIMIT {
        let s = PEAK_LIMIT / peak;
        near_r.iter_mut().chain(echo.iter_mut()).for_each(|v| *v *= s);
    }
    let mic: Vec<f64> = near_r.iter().zip(&echo).map(|(a, b)| a + b).collect();
    let buf = |v: Vec<f64>| AudioBuffer::new(v).map_err(|e| SimError::Contract(e.to_string()));
    Ok(SimSample {
        near: buf(near_r)?,
        far: buf(far.to_vec())?,
        echo: buf(echo)?,
        mic: buf(mic)?,
        meta: SimMeta { ser_db, delay_ms, scenario },
    })
}

/// Speech-like test signal: harmonic syllables with formant shaping,
/// occasional fricative noise, and pauses. Peak 0.5.
pub fn synth_speech(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fs = SAMPLE_RATE as f64;
    let mut out = vec![0.0; len];
    let mut pos = rng.gen_range(0..(0.2 * fs) as usize);
    while pos < len {
        let dur = (rng.gen_range(0.12..0.30) * fs) as usize;
        let f0 = rng.gen_range(90.0..250.0);
        let glide = rng.gen_range(-0.25..0.25);
        let f1 = rng.gen_range(300.0..900.0);
        let f2 = rng.gen_range(900.0..2500.0);
        let amp = rng.gen_range(0.3..1.0);
        let fricative = rng.gen_bool(0.3);
        let n_harm = (4000.0 / f0) as usize;
        let weights: Vec<f64> = (1..=n_harm)
            .map(|k| {
                let f = k as f64 * f0;
                let formant = |c: f64, bw: f64| (-((f - c) / bw).powi(2)).exp();
                (0.2 + formant(f1, 150.0) + 0.7 * formant(f2, 250.0)) / k as f64
            })
            .collect();
        let phases: Vec<f64> = (0..n_harm).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        let mut phase = 0.0;
        let mut prev = 0.0;
        for i in 0..dur.min(len - pos) {
            let u = i as f64 / dur as f64;
            let env = (std::f64::consts::PI * u).sin().powi(2);
            phase += std::f64::consts::TAU * f0 * (1.0 + glide * u) / fs;
            let mut v: f64 = weights.iter().zip(&phases).enumerate().map(|(k, (w, p))| w * ((k + 1) as f64 * phase + p).sin()).sum();
            if fricative && u > 0.6 {
                let g: f64 = StandardNormal.sample(&mut rng);
                v += 0.3 * (g - prev);
                prev = g;
            }
            out[pos + i] += amp * env * v;
        }
        pos += dur + rng.gen_range((0.05 * fs) as usize..(0.4 * fs) as usize);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    out
}

/// Write `n` synthetic speech files as a stand-in source corpus.
pub fn write_synthetic_corpus(dir: &Path, n: usize, len_s: f64, seed: u64) -> Result<Vec<PathBuf>, SimError> {
    std::fs::create_dir_all(dir)?;
    let len = (len_s * SAMPLE_RATE as f64).round() as usize;
    (0..n)
        .map(|i| {
            let path = dir.join(format!("talker_{i:03}.wav"));
            let audio = AudioBuffer::new(synth_speech(seed.wrapping_add(i as u64), len)).map_err(|e| SimError::Contract(e.to_string()))?;
            write_wav(&path, &audio, WavEncoding::Float32)?;
            Ok(path)
        })
        .collect()
}

/// One row of the dataset manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub near: PathBuf,
    pub far: PathBuf,
    pub echo: PathBuf,
    pub mic: PathBuf,
    pub scenario: Scenario,
    pub ser_db: f64,
    pub delay_ms: f64,
}

pub const MANIFEST_NAME: &str = "manifest.csv";

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), SimError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| SimError::Manifest(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| SimError::Manifest(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, SimError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| SimError::Manifest(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| SimError::Manifest(format!("{}: {e}", path.display()))))
        .collect()
}

/// Directory that manifest-relative paths resolve against.
pub fn manifest_root(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_dir(dir: &Path) -> Result<Vec<Vec<f64>>, SimError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    let mut clips = Vec::new();
    for p in paths {
        match read_wav::<f64>(&p) {
            Ok(a) if !a.is_empty() => clips.push(a.into_samples()),
            Ok(_) => log::warn!("{}: empty, skipped", p.display()),
            Err(e) => log::warn!("skipping source: {e}"),
        }
    }
    Ok(clips)
}

/// A `len`-sample excerpt starting at a random offset; short clips are tiled.
fn excerpt(rng: &mut ChaCha8Rng, clip: &[f64], len: usize) -> Vec<f64> {
    if clip.len() >= len {
        let start = rng.gen_range(0..=clip.len() - len);
        clip[start..start + len].to_vec()
    } else {
        clip.iter().cycle().take(len).cloned().collect()
    }
}

/// RNG stream for sample `index` of a dataset seeded with `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draw sample `index` from the source pool, redrawing silent far-end excerpts.
pub fn simulate_one(cfg: &SimConfig, sources: &[Vec<f64>], rirs: &[Vec<f64>], index: u64, len: usize) -> Result<SimSample, SimError> {
    if sources.len() < 2 {
        return Err(SimError::NoSources(format!("need >= 2 source clips, have {}", sources.len())));
    }
    let mut rng = sample_rng(cfg.seed, index);
    let ni = rng.gen_range(0..sources.len());
    let near = excerpt(&mut rng, &sources[ni], len);
    for _ in 0..MAX_REDRAWS {
        let mut fi = rng.gen_range(0..sources.len() - 1);
        if fi >= ni {
            fi += 1;
        }
        let far = excerpt(&mut rng, &sources[fi], len);
        match mix_with_bank(&near, &far, cfg, rng.gen(), rirs) {
            Err(SimError::SilentFarEnd) => continue,
            other => return other,
        }
    }
    Err(SimError::SilentFarEnd)
}

/// Simulate `n` samples from the WAVs in `source_dir` into `out_dir`.
///
/// Each sample is stored as `NNNNN_{near,far,echo,mic}.wav` (float32) and
/// listed in `out_dir/manifest.csv`. The stored `mic` is the float32 sum of
/// the stored `near` and `echo`.
pub fn make_dataset(cfg: &SimConfig, n: usize, clip_len_s: f64, source_dir: &Path, out_dir: &Path) -> Result<Vec<ManifestRow>, SimError> {
    cfg.validate()?;
    if !(clip_len_s > 0.0) {
        return Err(SimError::Config(format!("clip length must be > 0 s, got {clip_len_s}")));
    }
    let sources = load_dir(source_dir)?;
    if sources.len() < 2 {
        return Err(SimError::NoSources(source_dir.display().to_string()));
    }
    let rirs = match &cfg.rir_dir {
        Some(d) => {
            let r = load_dir(d)?;
            if r.is_empty() {
                return Err(SimError::NoSources(d.display().to_string()));
            }
            r
        }
        None => Vec::new(),
    };
    std::fs::create_dir_all(out_dir)?;
    let len = (clip_len_s * SAMPLE_RATE as f64).round() as usize;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let s = simulate_one(cfg, &sources, &rirs, i as u64, len)?;
        let id = format!("{i:05}");
        let near: Vec<f32> = s.near.samples().iter().map(|&v| v as f32).collect();
        let echo: Vec<f32> = s.echo.samples().iter().map(|&v| v as f32).collect();
        let mic: Vec<f32> = near.iter().zip(&echo).map(|(a, b)| a + b).collect();
        let far: Vec<f32> = s.far.samples().iter().map(|&v| v as f32).collect();
        let mut names = Vec::with_capacity(4);
        for (kind, data) in [("near", near), ("far", far), ("echo", echo), ("mic", mic)] {
            let name = PathBuf::from(format!("{id}_{kind}.wav"));
            let audio = AudioBuffer::new(data).map_err(|e| SimError::Contract(e.to_string()))?;
            write_wav(out_dir.join(&name), &audio, WavEncoding::Float32)?;
            names.push(name);
        }
        let mut names = names.into_iter();
        rows.push(ManifestRow {
            id,
            near: names.next().unwrap(),
            far: names.next().unwrap(),
            echo: names.next().unwrap(),
            mic: names.next().unwrap(),
            scenario: s.meta.scenario,
            ser_db: s.meta.ser_db,
            delay_ms: s.meta.delay_ms,
        });
    }
    write_manifest(&out_dir.join(MANIFEST_NAME), &rows)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn white(seed: u64, len: usize) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| { let g: f64 = StandardNormal.sample(&mut r); 0.3 * g }).collect()
    }

    #[test]
    fn rir_decays_and_is_seeded() {
        let h = gen_rir(3, 0.2, 4000);
        let e = |s: &[f64]| s.iter().map(|v| v * v).sum::<f64>();
        assert!(e(&h[2000..]) < e(&h[..2000]));
        assert_eq!(h, gen_rir(3, 0.2, 4000));
        assert_ne!(h, gen_rir(4, 0.2, 4000));
        assert!((h.iter().fold(0.0f64, |m, v| m.max(v.abs())) - 1.0).abs() < 1e-15);
        assert!((rir_envelope(0.2, 0.2) - 1e-3).abs() < 1e-15);
        // 3200 samples at 16 kHz is one RT60 of 0.2 s
        assert!((rir_envelope(0.2, 3200.0 / 16_000.0) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn distortion_small_signal_and_symmetry() {
        let x = white(1, 2000);
        let y = nonlinear_distort(&x, 1e-3, 10.0);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(1e-12), "{a} {b}");
        }
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let yd = nonlinear_distort(&x, 5.0, 0.8);
        let yn = nonlinear_distort(&neg, 5.0, 0.8);
        assert!(yd.iter().zip(&yn).all(|(a, b)| (a + b).abs() < 1e-15));
        assert!((rms(&yd) - rms(&x)).abs() < 1e-12);
    }

    #[test]
    fn convolution_matches_direct_sum() {
        let x = white(5, 700);
        let h = white(6, 90);
        let fast = convolve(&x, &h);
        for n in [0, 1, 89, 90, 400, 699] {
            let direct: f64 = (0..=n.min(89)).map(|k| h[k] * x[n - k]).sum();
            assert!((fast[n] - direct).abs() < 1e-10);
        }
    }

    #[test]
    fn silent_far_end_requests_redraw() {
        let near = synth_speech(1, 16_000);
        assert!(matches!(mix(&near, &vec![0.0; 16_000], &SimConfig::desk(), 0), Err(SimError::SilentFarEnd)));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig::default().validate().is_ok());
        let c = SimConfig { ser_db_range: [5.0, -5.0], ..SimConfig::default() };
        assert!(c.validate().is_err());
        let c = SimConfig { farend_only_prob: 1.5, ..SimConfig::default() };
        assert!(c.validate().is_err());
        let parsed: Result<SimConfig, _> = toml::from_str("bogus = 1");
        assert!(parsed.is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn mix_is_additive_and_hits_ser(seed in 0u64..1_000_000) {
            let near = synth_speech(seed, 24_000);
            let far = synth_speech(seed + 7, 24_000);
            let s = mix(&near, &far, &SimConfig::desk(), seed).unwrap();
            for ((m, n), e) in s.mic.samples().iter().zip(s.near.samples()).zip(s.echo.samples()) {
                prop_assert_eq!(*m, n + e);
            }
            match s.meta.scenario {
                Scenario::FarendOnly => {
                    prop_assert!(s.near.samples().iter().all(|&v| v == 0.0));
                    prop_assert_eq!(s.mic.samples(), s.echo.samples());
                }
                _ => prop_assert!((measured_ser_db(s.near.samples(), s.echo.samples()) - s.meta.ser_db).abs() <= 0.1),
            }
            prop_assert!((10.0..=40.0).contains(&s.meta.delay_ms));
            prop_assert_eq!(&s, &mix(&near, &far, &SimConfig::desk(), seed).unwrap());
        }
    }
}

//! Bark-scale band compression, network input features and gain→mask
//! post-processing.

use crate::dsp::SpectrumFrame;
use crate::scalar::Real;

/// Guard added inside logarithms and gain ratios.
pub const LOG_EPS: f64 = 1e-10;

/// Number of leading Bark coefficients that get first/second differences.
pub const DELTA_COEFFS: usize = 6;

/// Zwicker's arctan approximation of the Bark scale.
pub fn hz_to_bark(f: f64) -> f64 {
    13.0 * (0.00076 * f).atan() + 3.5 * (f / 7500.0).powi(2).atan()
}

/// Inverse of [`hz_to_bark`] by bisection (the map is strictly increasing).
pub fn bark_to_hz(z: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0e5f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if hz_to_bark(mid) < z {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Triangular band weights with centers equally spaced on the Bark axis.
///
/// Every column (STFT bin) sums to one, so `Bᵀ·1 = 1`. Rows are not
/// normalized: a band's response to a flat spectrum is its row sum.
#[derive(Debug, Clone, PartialEq)]
pub struct BarkMatrix<T> {
    n_bands: usize,
    n_bins: usize,
    /// Row-major `[n_bands][n_bins]`.
    weights: Vec<T>,
    band_centers: Vec<f64>,
    /// Nonzero bin range `[start, end)` per band.
    support: Vec<(usize, usize)>,
}

impl<T: Real> BarkMatrix<T> {
    pub fn new(n_bands: usize, n_bins: usize, sample_rate: u32) -> Self {
        assert!(n_bands >= 2, "need at least two Bark bands");
        assert!(n_bins >= 2, "need at least two bins");
        let nyquist = sample_rate as f64 / 2.0;
        let z_max = hz_to_bark(nyquist);
        let step = z_max / (n_bands - 1) as f64;
        let centers_z: Vec<f64> = (0..n_bands).map(|b| b as f64 * step).collect();
        let band_centers = centers_z.iter().map(|&z| bark_to_hz(z)).collect();

        let mut dense = vec![0.0f64; n_bands * n_bins];
        for k in 0..n_bins {
            let f = k as f64 * nyquist / (n_bins - 1) as f64;
            let z = hz_to_bark(f).min(z_max);
            let pos = z / step;
            let lo = (pos.floor() as usize).min(n_bands - 1);
            let frac = pos - lo as f64;
            dense[lo * n_bins + k] += 1.0 - frac;
            if lo + 1 < n_bands {
                dense[(lo + 1) * n_bins + k] += frac;
            }
            let col: f64 = (0..n_bands).map(|b| dense[b * n_bins + k]).sum();
            for b in 0..n_bands {
                dense[b * n_bins + k] /= col;
            }
        }

        let support = (0..n_bands)
            .map(|b| {
                let row = &dense[b * n_bins..(b + 1) * n_bins];
                let start = row.iter().position(|&w| w > 0.0).unwrap_or(0);
                let end = row.iter().rposition(|&w| w > 0.0).map_or(start, |e| e + 1);
                (start, end)
            })
            .collect();
        Self {
            n_bands,
            n_bins,
            weights: dense.into_iter().map(T::lit).collect(),
            band_centers,
            support,
        }
    }

    /// 100 bands over the 257 bins of a 512-point FFT at 16 kHz.
    pub fn standard() -> Self {
        Self::new(100, 257, crate::SAMPLE_RATE)
    }

    pub fn n_bands(&self) -> usize {
        self.n_bands
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn band_centers(&self) -> &[f64] {
        &self.band_centers
    }

    pub fn weight(&self, band: usize, bin: usize) -> T {
        self.weights[band * self.n_bins + bin]
    }

    pub fn row(&self, band: usize) -> &[T] {
        &self.weights[band * self.n_bins..(band + 1) * self.n_bins]
    }

    pub fn support(&self, band: usize) -> (usize, usize) {
        self.support[band]
    }

    /// `B · x` for a per-bin vector.
    pub fn apply(&self, per_bin: &[T]) -> Vec<T> {
        debug_assert_eq!(per_bin.len(), self.n_bins);
        (0..self.n_bands)
            .map(|b| {
                let (s, e) = self.support[b];
                let row = self.row(b);
                (s..e).map(|k| row[k] * per_bin[k]).sum()
            })
            .collect()
    }

    /// `Bᵀ · g` for a per-band vector.
    pub fn apply_transpose(&self, per_band: &[T]) -> Vec<T> {
        debug_assert_eq!(per_band.len(), self.n_bands);
        let mut out = vec![T::zero(); self.n_bins];
        for (b, &g) in per_band.iter().enumerate() {
            let (s, e) = self.support[b];
            let row = self.row(b);
            for k in s..e {
                out[k] += row[k] * g;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.n_bands).map(|b| self.row(b).iter().copied().sum()).collect()
    }
}

/// `log10(B·|X|² + ε)`.
pub fn bark_log_power<T: Real>(frame: &SpectrumFrame<T>, bark: &BarkMatrix<T>) -> Vec<T> {
    let eps = T::lit(LOG_EPS);
    bark.apply(&frame.power()).into_iter().map(|p| (p + eps).log10()).collect()
}

/// Per-band suppression gains in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainVector<T>(pub Vec<T>);

impl<T: Real> GainVector<T> {
    pub fn constant(n_bands: usize, g: T) -> Self {
        Self(vec![g; n_bands])
    }

    pub fn is_valid(&self) -> bool {
        self.0.iter().all(|&g| g >= T::zero() && g <= T::one())
    }
}

/// Ideal band gain `min(1, sqrt(B|S|² / (B|Y|² + ε)))`.
pub fn target_gain<T: Real>(clean: &SpectrumFrame<T>, mixture: &SpectrumFrame<T>, bark: &BarkMatrix<T>) -> GainVector<T> {
    let eps = T::lit(LOG_EPS);
    let s = bark.apply(&clean.power());
    let y = bark.apply(&mixture.power());
    GainVector(s.iter().zip(&y).map(|(&s, &y)| (s / (y + eps)).sqrt().min(T::one())).collect())
}

/// `clamp(Bᵀ·g, 0, 1)`.
pub fn gain_to_mask<T: Real>(gain: &GainVector<T>, bark: &BarkMatrix<T>) -> Vec<T> {
    bark.apply_transpose(&gain.0)
        .into_iter()
        .map(|m| m.max(T::zero()).min(T::one()))
        .collect()
}

/// Scale each bin of `mixture` by the mask; phase is preserved.
pub fn apply_mask<T: Real>(mask: &[T], mixture: &SpectrumFrame<T>) -> SpectrumFrame<T> {
    debug_assert_eq!(mask.len(), mixture.len());
    SpectrumFrame(mixture.0.iter().zip(mask).map(|(&y, &m)| y * m).collect())
}

/// Causal feature assembly: Bark log powers followed by backward first and
/// second differences of the first six coefficients.
#[derive(Debug, Clone, Default)]
pub struct FeatureAssembler<T> {
    prev: Option<Vec<T>>,
    prev_delta: Option<Vec<T>>,
}

impl<T: Real> FeatureAssembler<T> {
    pub fn new() -> Self {
        Self { prev: None, prev_delta: None }
    }

    pub fn reset(&mut self) {
        self.prev = None;
        self.prev_delta = None;
    }

    /// Feature width for `n_bands` Bark coefficients.
    pub fn width(n_bands: usize) -> usize {
        n_bands + 2 * DELTA_COEFFS.min(n_bands)
    }

    pub fn push(&mut self, bark: &[T]) -> Vec<T> {
        let nd = DELTA_COEFFS.min(bark.len());
        let delta: Vec<T> = match &self.prev {
            Some(p) => (0..nd).map(|i| bark[i] - p[i]).collect(),
            None => vec![T::zero(); nd],
        };
        let delta2: Vec<T> = match &self.prev_delta {
            Some(d) => (0..nd).map(|i| delta[i] - d[i]).collect(),
            None => vec![T::zero(); nd],
        };
        let mut out = Vec::with_capacity(bark.len() + 2 * nd);
        out.extend_from_slice(bark);
        out.extend_from_slice(&delta);
        out.extend_from_slice(&delta2);
        self.prev = Some(bark[..nd].to_vec());
        self.prev_delta = Some(delta);
        out
    }
}

pub fn assemble_features<T: Real>(bark_seq: &[Vec<T>]) -> Vec<Vec<T>> {
    let mut asm = FeatureAssembler::new();
    bark_seq.iter().map(|b| asm.push(b)).collect()
}

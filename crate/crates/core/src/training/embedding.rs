use super::TrainError;
use crate::bark::{BarkMatrix, LOG_EPS};
use crate::scalar::Real;

/// Masked magnitude spectrogram, both `[frames × bins]` row-major.
#[derive(Debug, Clone, Copy)]
pub struct SpectralInput<'a, T> {
    pub mask: &'a [T],
    pub magnitude: &'a [T],
    pub frames: usize,
}

/// Layered embedding of a (masked) spectrogram, differentiable in the mask.
pub trait EmbeddingProvider<T: Real> {
    fn layer_count(&self) -> usize;

    /// One flattened tensor per layer.
    fn embed(&self, input: &SpectralInput<'_, T>) -> Result<Vec<Vec<T>>, TrainError>;

    /// Gradient w.r.t. `input.mask` given upstream gradients per layer.
    fn input_gradient(&self, input: &SpectralInput<'_, T>, upstream: &[Vec<T>]) -> Result<Vec<T>, TrainError>;
}

/// Two-layer spectral stand-in for a frozen speech encoder:
/// layer 1 is `log10(B·(mask ∘ |Y|)² + ε)` per frame, layer 2 the layer-1
/// change over `context` frames.
#[derive(Debug, Clone)]
pub struct ProxyEmbedding<T> {
    bark: BarkMatrix<T>,
    context: usize,
}

impl<T: Real> ProxyEmbedding<T> {
    pub fn new(bark: BarkMatrix<T>, context: usize) -> Self {
        assert!(context >= 1, "context must be at least one frame");
        Self { bark, context }
    }

    pub fn bark(&self) -> &BarkMatrix<T> {
        &self.bark
    }

    fn check(&self, input: &SpectralInput<'_, T>) -> Result<usize, TrainError> {
        let k = self.bark.n_bins();
        let n = input.frames * k;
        if input.mask.len() != n || input.magnitude.len() != n {
            return Err(TrainError::Contract(format!(
                "spectral input must be {} frames × {k} bins (mask {}, magnitude {})",
                input.frames,
                input.mask.len(),
                input.magnitude.len()
            )));
        }
        Ok(k)
    }

    /// Band powers `B·(m∘a)²`, `[frames × bands]`.
    fn band_power(&self, input: &SpectralInput<'_, T>, k: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(input.frames * self.bark.n_bands());
        let mut p = vec![T::zero(); k];
        for t in 0..input.frames {
            for i in 0..k {
                let v = input.mask[t * k + i] * input.magnitude[t * k + i];
                p[i] = v * v;
            }
            out.extend(self.bark.apply(&p));
        }
        out
    }
}

impl<T: Real> EmbeddingProvider<T> for ProxyEmbedding<T> {
    fn layer_count(&self) -> usize {
        2
    }

    fn embed(&self, input: &SpectralInput<'_, T>) -> Result<Vec<Vec<T>>, TrainError> {
        let k = self.check(input)?;
        let nb = self.bark.n_bands();
        let eps = T::lit(LOG_EPS);
        let l1: Vec<T> = self.band_power(input, k).into_iter().map(|p| (p + eps).log10()).collect();
        let c = self.context;
        let l2 = (c..input.frames).flat_map(|t| (0..nb).map(move |b| (t, b))).map(|(t, b)| l1[t * nb + b] - l1[(t - c) * nb + b]).collect();
        Ok(vec![l1, l2])
    }

    fn input_gradient(&self, input: &SpectralInput<'_, T>, upstream: &[Vec<T>]) -> Result<Vec<T>, TrainError> {
        let k = self.check(input)?;
        let nb = self.bark.n_bands();
        let frames = input.frames;
        let c = self.context;
        if upstream.len() != 2 || upstream[0].len() != frames * nb || upstream[1].len() != frames.saturating_sub(c) * nb {
            return Err(TrainError::Contract("upstream gradient does not match embedding layout".into()));
        }
        let mut d1 = upstream[0].clone();
        for t in c..frames {
            for b in 0..nb {
                let g = upstream[1][(t - c) * nb + b];
                d1[t * nb + b] += g;
                d1[(t - c) * nb + b] -= g;
            }
        }
        let power = self.band_power(input, k);
        let eps = T::lit(LOG_EPS);
        let ln10 = T::LN_10();
        let mut dmask = vec![T::zero(); frames * k];
        for t in 0..frames {
            for b in 0..nb {
                let dp = d1[t * nb + b] / ((power[t * nb + b] + eps) * ln10);
                let (lo, hi) = self.bark.support(b);
                let row = self.bark.row(b);
                for i in lo..hi {
                    let (m, a) = (input.mask[t * k + i], input.magnitude[t * k + i]);
                    dmask[t * k + i] += dp * row[i] * T::lit(2.0) * m * a * a;
                }
            }
        }
        Ok(dmask)
    }
}

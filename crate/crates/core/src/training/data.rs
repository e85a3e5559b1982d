use crate::bark::{assemble_features, bark_log_power, target_gain, BarkMatrix};
use crate::dsp::{SpectrumFrame, Stft};
use crate::linear_aec::{KalmanAec, KalmanConfig};
use crate::dsp::wav::read_wav;
use crate::par::{par_map, worker_count};
use crate::scalar::Real;
use crate::sim::{manifest_root, read_manifest, Scenario};
use crate::SAMPLE_RATE;

use super::TrainError;

/// Network inputs and targets for one clip, all row-major `[frames × ·]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample<T> {
    pub frames: usize,
    pub feats_mic: Vec<T>,
    pub feats_echo: Vec<T>,
    /// `|Y|` of the microphone signal.
    pub mic_mag: Vec<T>,
    /// `|S|` of the near-end reference at the microphone.
    pub near_mag: Vec<T>,
    pub target: Vec<T>,
    pub farend_only: bool,
}

pub(crate) fn lead_in<T: Real>(x: &[T], lead: usize) -> Vec<T> {
    let mut v = vec![T::zero(); lead];
    v.extend_from_slice(x);
    v
}

/// Linear AEC + STFT + Bark features, shared by training and inference.
#[derive(Debug, Clone)]
pub struct FrontEnd<T: Real> {
    pub stft: Stft<T>,
    pub bark: BarkMatrix<T>,
    pub kalman: KalmanConfig<T>,
}

impl<T: Real> FrontEnd<T> {
    pub fn new(stft: Stft<T>, bark: BarkMatrix<T>, kalman: KalmanConfig<T>) -> Self {
        Self { stft, bark, kalman }
    }

    /// Zeros placed before the signal so its first sample is already covered
    /// by a full overlap of analysis windows (`win_len - hop`).
    pub fn lead(&self) -> usize {
        let c = self.stft.config();
        c.win_len - c.hop
    }

    pub fn feature_width(&self) -> usize {
        crate::bark::FeatureAssembler::<T>::width(self.bark.n_bands())
    }

    fn features(&self, frames: &[SpectrumFrame<T>]) -> Vec<T> {
        let bark: Vec<Vec<T>> = frames.iter().map(|f| bark_log_power(f, &self.bark)).collect();
        assemble_features(&bark).into_iter().flatten().collect()
    }

    /// Run the linear canceller over the clip and derive every training array.
    pub fn prepare(&self, near: &[T], far: &[T], mic: &[T], farend_only: bool) -> Result<TrainExample<T>, TrainError> {
        if near.len() != mic.len() || far.len() != mic.len() {
            return Err(TrainError::Contract(format!("clip lengths differ: near {}, far {}, mic {}", near.len(), far.len(), mic.len())));
        }
        let mut aec = KalmanAec::new(self.kalman.clone()).map_err(|e| TrainError::Contract(e.to_string()))?;
        let lin = aec.process_signal(far, mic).map_err(|e| TrainError::Contract(e.to_string()))?;
        let ana = |x: &[T]| self.stft.analyze(&lead_in(x, self.lead())).map_err(|e| TrainError::Contract(e.to_string()));
        let (y, e, s) = (ana(mic)?, ana(&lin.echo_est[..mic.len()])?, ana(near)?);
        let target = y.iter().zip(&s).flat_map(|(yf, sf)| target_gain(sf, yf, &self.bark).0).collect();
        Ok(TrainExample {
            frames: y.len(),
            feats_mic: self.features(&y),
            feats_echo: self.features(&e),
            mic_mag: y.iter().flat_map(|f| f.magnitude()).collect(),
            near_mag: s.iter().flat_map(|f| f.magnitude()).collect(),
            target,
            farend_only,
        })
    }
}

/// Read a simulated-dataset manifest and prepare one example per segment.
///
/// Clips are cut into non-overlapping `segment_s` pieces; a remainder shorter
/// than half a segment is dropped. Clips shorter than a segment are used whole.
pub fn load_manifest_examples<T: Real>(manifest: &std::path::Path, fe: &FrontEnd<T>, segment_s: f64) -> Result<Vec<TrainExample<T>>, TrainError> {
    let rows = read_manifest(manifest).map_err(|e| TrainError::Data(e.to_string()))?;
    if rows.is_empty() {
        return Err(TrainError::Data(format!("{}: manifest lists no samples", manifest.display())));
    }
    let root = manifest_root(manifest);
    let seg = ((segment_s * SAMPLE_RATE as f64).round() as usize).max(fe.stft.config().win_len);
    let per_row = par_map(&rows, worker_count(), |row| -> Result<Vec<TrainExample<T>>, TrainError> {
        let load = |p: &std::path::Path| {
            read_wav::<T>(root.join(p)).map(|a| a.into_samples()).map_err(|e| TrainError::Data(e.to_string()))
        };
        let (near, far, mic) = (load(&row.near)?, load(&row.far)?, load(&row.mic)?);
        let farend_only = row.scenario == Scenario::FarendOnly;
        let mut out = Vec::new();
        let mut start = 0;
        while start < mic.len() {
            let end = (start + seg).min(mic.len());
            if end - start < seg / 2 && start > 0 {
                break;
            }
            out.push(fe.prepare(&near[start..end], &far[start..end], &mic[start..end], farend_only)?);
            start = end;
        }
        Ok(out)
    });
    let mut all = Vec::new();
    for r in per_row {
        all.extend(r?);
    }
    Ok(all)
}

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::embedding::{EmbeddingProvider, SpectralInput};
use super::losses::{bark_gain_loss_grad, ssl_loss_grad, stage_loss};
use super::optim::{adam_step, AdamState, LrSchedule, ScheduleConfig};
use super::{Stage, TrainError, TrainExample};
use crate::bark::BarkMatrix;
use crate::model::{backward, forward_batch, BnMode, ForwardCache, ModelError, ModelParams, Tensor};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageConfig {
    pub max_epochs: usize,
    /// Starting learning rate; stage 2 without one resumes at stage 1's final rate.
    pub lr: Option<f64>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self { max_epochs: 100, lr: None }
    }
}

/// Run settings. Defaults are the reference configuration (batch 128,
/// 10 s segments); desk-scale runs override them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub segment_s: f64,
    pub val_fraction: f64,
    pub bn_momentum: f64,
    pub ssl_context: usize,
    pub gain_compression: f64,
    pub schedule: ScheduleConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 128,
            segment_s: 10.0,
            val_fraction: 0.1,
            bn_momentum: 0.1,
            ssl_context: 4,
            gain_compression: 0.5,
            schedule: ScheduleConfig::default(),
            stage1: StageConfig::default(),
            stage2: StageConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Contract(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad("bn_momentum must lie in (0, 1]");
        }
        if self.ssl_context == 0 {
            return bad("ssl_context must be >= 1");
        }
        let s = &self.schedule;
        if !(s.lr > 0.0 && s.floor > 0.0 && s.factor > 0.0 && s.factor < 1.0) || s.plateau_patience == 0 || s.early_stop_patience == 0 {
            return bad("schedule needs lr, floor > 0, factor in (0, 1) and nonzero patience");
        }
        Ok(())
    }

    fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
        }
    }
}

/// Loss components of one batch or dataset pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub total: f64,
    pub l_bark: f64,
    pub l_ssl: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: u8,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    #[serde(rename = "val_L_bark")]
    pub val_l_bark: f64,
    #[serde(rename = "val_L_ssl")]
    pub val_l_ssl: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParams<T>,
    /// Parameters handed on at the end of each stage (best validation epoch).
    pub stage_params: Vec<(Stage, ModelParams<T>)>,
    /// Validation metrics of each stage's starting parameters.
    pub stage_start: Vec<(Stage, Metrics)>,
    pub history: Vec<EpochRecord>,
    pub final_lr: f64,
}

/// Training stopped early; carries the last parameters with a finite loss.
#[derive(Debug)]
pub struct TrainAbort<T> {
    pub error: TrainError,
    pub checkpoint: Option<ModelParams<T>>,
    pub history: Vec<EpochRecord>,
}

impl<T> std::fmt::Display for TrainAbort<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl<T: std::fmt::Debug> std::error::Error for TrainAbort<T> {}

impl<T> From<TrainError> for TrainAbort<T> {
    fn from(error: TrainError) -> Self {
        Self { error, checkpoint: None, history: Vec::new() }
    }
}

/// Seeded split into `(train, validation)` index lists.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_val = ((n as f64) * val_fraction).round() as usize;
    let n_val = if val_fraction > 0.0 && n > 1 { n_val.clamp(1, n - 1) } else { 0 };
    let val = idx[..n_val].to_vec();
    (idx[n_val..].to_vec(), val)
}

/// Keeps the split independent of the epoch shuffles drawn from the same seed.
const SPLIT_SALT: u64 = 0x0005_eed5_917b_0001;

fn batch_tensor<T: Real>(batch: &[&TrainExample<T>], frames: usize, width: usize, pick: impl Fn(&TrainExample<T>) -> &[T]) -> Tensor<T> {
    let b = batch.len();
    let mut x = Tensor::zeros(&[b, 1, width, frames]);
    for (bi, ex) in batch.iter().enumerate() {
        let src = pick(ex);
        for t in 0..frames {
            for f in 0..width {
                x.data_mut()[(bi * width + f) * frames + t] = src[t * width + f];
            }
        }
    }
    x
}

/// Forward a batch and evaluate the stage objective.
///
/// With `BnMode::Train` also returns the gradient of the objective w.r.t.
/// the gains and the forward cache needed by [`backward`].
#[allow(clippy::type_complexity)]
pub fn batch_objective<T: Real, P: EmbeddingProvider<T>>(
    params: &ModelParams<T>,
    batch: &[&TrainExample<T>],
    stage: Stage,
    mode: BnMode,
    provider: &P,
    bark: &BarkMatrix<T>,
    compression: f64,
) -> Result<(Metrics, Option<(Tensor<T>, ForwardCache<T>)>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Contract("empty batch".into()));
    }
    let cfg = params.config();
    let (fw, nb, k) = (cfg.in_features, cfg.out_bands, bark.n_bins());
    if nb != bark.n_bands() {
        return Err(TrainError::Contract(format!("model predicts {nb} bands, Bark matrix has {}", bark.n_bands())));
    }
    let frames = batch.iter().map(|e| e.frames).min().unwrap();
    for ex in batch {
        if ex.feats_mic.len() != ex.frames * fw || ex.mic_mag.len() != ex.frames * k || ex.target.len() != ex.frames * nb {
            return Err(TrainError::Contract("example arrays do not match the model/Bark layout".into()));
        }
    }
    let mic = batch_tensor(batch, frames, fw, |e| &e.feats_mic);
    let echo = batch_tensor(batch, frames, fw, |e| &e.feats_echo);
    let cache = forward_batch(params, &mic, &echo, mode)?;
    let gains = cache.gains().data();
    let b = batch.len();

    let mut est = Vec::with_capacity(b * frames * nb);
    let mut tgt = Vec::with_capacity(b * frames * nb);
    for (bi, ex) in batch.iter().enumerate() {
        for t in 0..frames {
            for band in 0..nb {
                est.push(gains[(bi * nb + band) * frames + t]);
            }
        }
        tgt.extend_from_slice(&ex.target[..frames * nb]);
    }
    let (l_bark, dbark) = bark_gain_loss_grad(&est, &tgt, T::lit(compression))?;

    let inv_b = T::one() / T::from_usize_lossy(b);
    let ones = vec![T::one(); frames * k];
    let mut l_ssl = T::zero();
    let mut dssl = vec![T::zero(); b * frames * nb];
    for (bi, ex) in batch.iter().enumerate() {
        let mut mask = Vec::with_capacity(frames * k);
        for t in 0..frames {
            let g = &est[(bi * frames + t) * nb..][..nb];
            mask.extend(bark.apply_transpose(g).into_iter().map(|m| m.max(T::zero()).min(T::one())));
        }
        let est_in = SpectralInput { mask: &mask, magnitude: &ex.mic_mag[..frames * k], frames };
        let ref_in = SpectralInput { mask: &ones, magnitude: &ex.near_mag[..frames * k], frames };
        let (l, dl) = ssl_loss_grad(&provider.embed(&est_in)?, &provider.embed(&ref_in)?)?;
        l_ssl += l * inv_b;
        if mode == BnMode::Train {
            let dmask = provider.input_gradient(&est_in, &dl)?;
            for t in 0..frames {
                let dg = bark.apply(&dmask[t * k..][..k]);
                for (band, v) in dg.into_iter().enumerate() {
                    dssl[(bi * frames + t) * nb + band] = v * inv_b;
                }
            }
        }
    }
    let total = stage_loss(stage.number(), l_bark, l_ssl)?;
    let metrics = Metrics { total: total.as_f64(), l_bark: l_bark.as_f64(), l_ssl: l_ssl.as_f64() };
    if mode == BnMode::Eval {
        return Ok((metrics, None));
    }
    let (wb, ws) = stage.weights();
    let (wb, ws) = (T::lit(wb), T::lit(ws));
    let mut dg = Tensor::zeros(cache.gains().shape());
    for bi in 0..b {
        for t in 0..frames {
            for band in 0..nb {
                let i = (bi * frames + t) * nb + band;
                dg.data_mut()[(bi * nb + band) * frames + t] = wb * dbark[i] + ws * dssl[i];
            }
        }
    }
    Ok((metrics, Some((dg, cache))))
}

/// Exponential moving average of batch statistics into running statistics.
pub fn update_running_stats<T: Real>(params: &mut ModelParams<T>, cache: &ForwardCache<T>, momentum: f64) -> Result<(), ModelError> {
    let m = T::lit(momentum);
    let keep = T::one() - m;
    for (prefix, mean, var) in cache.batch_stats() {
        for (slot, batch) in [("running_mean", &mean), ("running_var", &var)] {
            let t = params.get_mut(&format!("{prefix}.{slot}"))?;
            for (r, &v) in t.data_mut().iter_mut().zip(batch.iter()) {
                *r = keep * *r + m * v;
            }
        }
    }
    Ok(())
}

struct Ctx<'a, T: Real, P> {
    cfg: &'a TrainConfig,
    data: &'a [TrainExample<T>],
    train_idx: &'a [usize],
    val_idx: &'a [usize],
    provider: &'a P,
    bark: &'a BarkMatrix<T>,
}

impl<T: Real, P: EmbeddingProvider<T>> Ctx<'_, T, P> {
    fn evaluate(&self, params: &ModelParams<T>, stage: Stage) -> Result<Metrics, TrainError> {
        let mut acc = Metrics { total: 0.0, l_bark: 0.0, l_ssl: 0.0 };
        let n = self.val_idx.len() as f64;
        for chunk in self.val_idx.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainExample<T>> = chunk.iter().map(|&i| &self.data[i]).collect();
            let (m, _) = batch_objective(params, &batch, stage, BnMode::Eval, self.provider, self.bark, self.cfg.gain_compression)?;
            let w = chunk.len() as f64 / n;
            acc.total += m.total * w;
            acc.l_bark += m.l_bark * w;
            acc.l_ssl += m.l_ssl * w;
        }
        Ok(acc)
    }

    /// One pass over the training split; returns the sample-weighted mean loss.
    fn epoch(&self, params: &mut ModelParams<T>, adam: &mut AdamState<T>, lr: f64, stage: Stage, rng: &mut ChaCha8Rng) -> Result<f64, TrainError> {
        let mut order = self.train_idx.to_vec();
        order.shuffle(rng);
        let mut sum = 0.0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainExample<T>> = chunk.iter().map(|&i| &self.data[i]).collect();
            let (m, g) = batch_objective(params, &batch, stage, BnMode::Train, self.provider, self.bark, self.cfg.gain_compression)?;
            if !m.total.is_finite() {
                return Ok(f64::NAN);
            }
            let (dg, cache) = g.expect("training mode returns gradients");
            let grads = backward(params, &cache, &dg).map_err(|e| match e {
                ModelError::NonFinite(layer) => TrainError::Integrity(layer),
                other => TrainError::Model(other),
            })?;
            adam_step(params, &grads, adam, lr)?;
            update_running_stats(params, &cache, self.cfg.bn_momentum)?;
            sum += m.total * chunk.len() as f64;
        }
        Ok(sum / order.len() as f64)
    }
}

/// Run the stage plan over `data`, holding out a seeded validation split.
///
/// Each stage keeps the parameters of its best validation epoch and hands
/// them to the next stage together with its final learning rate.
pub fn train<T: Real, P: EmbeddingProvider<T>>(
    cfg: &TrainConfig,
    init: ModelParams<T>,
    data: &[TrainExample<T>],
    plan: &[Stage],
    provider: &P,
    bark: &BarkMatrix<T>,
) -> Result<TrainOutcome<T>, TrainAbort<T>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(TrainError::Contract(format!("need at least 2 examples to train and validate, got {}", data.len())).into());
    }
    if plan.is_empty() {
        return Err(TrainError::Contract("empty stage plan".into()).into());
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction.max(1e-9), cfg.seed);
    let ctx = Ctx { cfg, data, train_idx: &train_idx, val_idx: &val_idx, provider, bark };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init;
    let mut history = Vec::new();
    let mut stage_params = Vec::new();
    let mut stage_start = Vec::new();
    let mut lr_carry = cfg.schedule.lr;
    let mut epoch_no = 0;
    for (si, &stage) in plan.iter().enumerate() {
        let scfg = cfg.stage(stage);
        let lr0 = scfg.lr.unwrap_or(if si == 0 { cfg.schedule.lr } else { lr_carry });
        let mut sched = LrSchedule::restart(cfg.schedule, lr0);
        let mut adam = AdamState::new(&params);
        let start = ctx.evaluate(&params, stage).map_err(TrainAbort::from)?;
        log::info!("stage {} start: val {:.5} (bark {:.5}, ssl {:.5})", stage.number(), start.total, start.l_bark, start.l_ssl);
        stage_start.push((stage, start));
        let mut best = params.clone();
        for _ in 0..scfg.max_epochs {
            epoch_no += 1;
            let lr = sched.lr();
            let last_finite = params.clone();
            let abort = |error: TrainError, history: &Vec<EpochRecord>| TrainAbort { error, checkpoint: Some(last_finite.clone()), history: history.clone() };
            let train_loss = match ctx.epoch(&mut params, &mut adam, lr, stage, &mut rng) {
                Ok(v) => v,
                Err(e) => return Err(abort(e, &history)),
            };
            let val = match ctx.evaluate(&params, stage) {
                Ok(v) => v,
                Err(e) => return Err(abort(e, &history)),
            };
            if !train_loss.is_finite() || !val.total.is_finite() || !params.is_finite() {
                return Err(abort(TrainError::Diverged { stage: stage.number(), epoch: epoch_no }, &history));
            }
            history.push(EpochRecord {
                epoch: epoch_no,
                stage: stage.number(),
                lr,
                train_loss,
                val_loss: val.total,
                val_l_bark: val.l_bark,
                val_l_ssl: val.l_ssl,
            });
            log::info!(
                "stage {} epoch {epoch_no}: lr {lr:.2e} train {train_loss:.5} val {:.5} (bark {:.5}, ssl {:.5})",
                stage.number(),
                val.total,
                val.l_bark,
                val.l_ssl
            );
            let step = sched.observe(val.total);
            if step.improved {
                best = params.clone();
            }
            if step.stop {
                break;
            }
        }
        lr_carry = sched.lr();
        params = best;
        stage_params.push((stage, params.clone()));
    }
    Ok(TrainOutcome { params, stage_params, stage_start, history, final_lr: lr_carry })
}

pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in history {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

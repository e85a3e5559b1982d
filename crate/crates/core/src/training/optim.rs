use std::collections::BTreeMap;
use std::path::Path;

use crate::model::weights::{read_tensors, write_tensors, WeightsError};
use crate::model::{is_trainable, Gradients, ModelParams, Tensor};
use crate::scalar::Real;

use super::TrainError;

/// First/second moments for every trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: BTreeMap<_, _> = params
            .iter()
            .filter(|(k, _)| is_trainable(k))
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        Self { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Sidecar file next to a checkpoint (EFWT container, f32 payload).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), WeightsError> {
        let mut all = BTreeMap::new();
        for (k, t) in &self.m {
            all.insert(format!("m:{k}"), t.clone());
        }
        for (k, t) in &self.v {
            all.insert(format!("v:{k}"), t.clone());
        }
        all.insert("adam:step".into(), Tensor::from_vec(&[1], vec![T::lit(self.step as f64)]));
        write_tensors(&all, path)
    }

    pub fn load(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<Self, WeightsError> {
        let raw = read_tensors(path)?;
        let mut st = Self::new(params);
        let fetch = |key: String, want: &[usize]| -> Result<Tensor<T>, WeightsError> {
            let t = raw.get(&key).ok_or_else(|| WeightsError::Integrity(format!("optimizer state lacks `{key}`")))?;
            if t.shape() != want {
                return Err(WeightsError::Integrity(format!("optimizer tensor `{key}` has shape {:?}", t.shape())));
            }
            Ok(t.cast())
        };
        let names: Vec<(String, Vec<usize>)> = st.m.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect();
        for (k, shape) in names {
            st.m.insert(k.clone(), fetch(format!("m:{k}"), &shape)?);
            st.v.insert(k.clone(), fetch(format!("v:{k}"), &shape)?);
        }
        st.step = fetch("adam:step".into(), &[1])?.data()[0].as_f64() as u64;
        Ok(st)
    }
}

/// Bias-corrected Adam update of every trainable tensor.
pub fn adam_step<T: Real>(params: &mut ModelParams<T>, grads: &Gradients<T>, state: &mut AdamState<T>, lr: f64) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let (tb1, tb2, teps) = (T::lit(b1), T::lit(b2), T::lit(state.eps));
    let (one, lr_t, c1_t, c2_t) = (T::one(), T::lit(lr), T::lit(c1), T::lit(c2));
    for (name, p) in params.iter_mut() {
        if !is_trainable(name) {
            continue;
        }
        let g = grads.get(name).ok_or_else(|| TrainError::Contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(TrainError::Contract(format!("gradient shape for `{name}`")));
        }
        let m = state.m.get_mut(name).ok_or_else(|| TrainError::Contract(format!("no moment for `{name}`")))?;
        let v = state.v.get_mut(name).unwrap();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mv = tb1 * *mv + (one - tb1) * gv;
            *vv = tb2 * *vv + (one - tb2) * gv * gv;
            let mhat = *mv / c1_t;
            let vhat = *vv / c2_t;
            *pv -= lr_t * mhat / (vhat.sqrt() + teps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub lr: f64,
    pub plateau_patience: usize,
    pub factor: f64,
    pub floor: f64,
    pub early_stop_patience: usize,
    /// Minimum validation-loss decrease that counts as improvement.
    pub min_delta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { lr: 1e-3, plateau_patience: 5, factor: 0.5, floor: 1e-5, early_stop_patience: 10, min_delta: 1e-5 }
    }
}

/// What the schedule decided after one validation epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleStep {
    pub improved: bool,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Reduce-on-plateau learning rate with early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    cfg: ScheduleConfig,
    lr: f64,
    best: f64,
    since_reduce: usize,
    since_best: usize,
}

impl LrSchedule {
    pub fn new(cfg: ScheduleConfig) -> Self {
        Self { lr: cfg.lr.max(cfg.floor), cfg, best: f64::INFINITY, since_reduce: 0, since_best: 0 }
    }

    /// Continue from `lr` with fresh plateau bookkeeping.
    pub fn restart(cfg: ScheduleConfig, lr: f64) -> Self {
        Self::new(ScheduleConfig { lr, ..cfg })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn observe(&mut self, val_loss: f64) -> ScheduleStep {
        let improved = val_loss < self.best - self.cfg.min_delta;
        let mut lr_reduced = false;
        if improved {
            self.best = val_loss;
            self.since_reduce = 0;
            self.since_best = 0;
        } else {
            self.since_reduce += 1;
            self.since_best += 1;
            if self.since_reduce == self.cfg.plateau_patience {
                let next = (self.lr * self.cfg.factor).max(self.cfg.floor);
                lr_reduced = next < self.lr;
                self.lr = next;
                self.since_reduce = 0;
            }
        }
        ScheduleStep { improved, lr_reduced, stop: self.since_best >= self.cfg.early_stop_patience }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn mini() -> ModelParams<f64> {
        init_params(&ModelConfig::mirrored(vec![4, 6], 3, 5, 6, 10, 4), 1).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = mini();
        let before = p.clone();
        let mut g = p.zeros_like();
        for (k, t) in g.iter_mut() {
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = if (i + k.len()) % 2 == 0 { 0.3 } else { -2.0 };
            }
        }
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        for (k, t) in p.iter() {
            let (b, gk) = (before.get(k).unwrap(), &g[k]);
            for ((&a, &b0), &gv) in t.data().iter().zip(b.data()).zip(gk.data()) {
                let want = if is_trainable(k) { -1e-3 * gv.signum() } else { 0.0 };
                assert!((a - b0 - want).abs() < 1e-9, "{k}");
            }
        }
    }

    #[test]
    fn zero_gradients_leave_params_and_decay_moments() {
        let mut p = mini();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let z = p.zeros_like();
        adam_step(&mut p, &z, &mut st, 1e-3).unwrap();
        assert_eq!(p, before);
        let mut g = p.zeros_like();
        g.get_mut("out.b").unwrap().data_mut()[0] = 1.0;
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let m1 = st.m["out.b"].data()[0];
        let snapshot = p.clone();
        adam_step(&mut p, &z, &mut st, 1e-3).unwrap();
        assert!(st.m["out.b"].data()[0] < m1);
        assert_eq!(p.get("out.w").unwrap(), before.get("out.w").unwrap());
        // decaying momentum still moves `out.b`, nothing else
        assert_eq!(p.get("fc.w").unwrap(), snapshot.get("fc.w").unwrap());
    }

    #[test]
    fn second_identical_step_is_no_larger() {
        // closed form: step_t = lr · m̂_t / (sqrt(v̂_t) + ε) with constant g gives |g|/(|g|+ε) both times
        let mut p = mini();
        let mut st = AdamState::new(&p);
        let mut g = p.zeros_like();
        g.get_mut("out.b").unwrap().data_mut()[0] = 1e-6;
        let x0 = p.get("out.b").unwrap().data()[0];
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let x1 = p.get("out.b").unwrap().data()[0];
        adam_step(&mut p, &g, &mut st, 1e-3).unwrap();
        let x2 = p.get("out.b").unwrap().data()[0];
        let (s1, s2) = ((x1 - x0).abs(), (x2 - x1).abs());
        let (gv, eps) = (1e-6f64, 1e-8f64);
        let m2 = (0.1 * 0.9 * gv + 0.1 * gv) / (1.0 - 0.81);
        let v2 = ((0.001 * 0.999 + 0.001) * gv * gv / (1.0 - 0.999f64.powi(2))).sqrt();
        assert!((s1 - 1e-3 * gv / (gv + eps)).abs() < 1e-12);
        assert!((s2 - 1e-3 * m2 / (v2 + eps)).abs() < 1e-12);
        assert!(s2 <= s1 + 1e-15);
    }

    #[test]
    fn plateau_and_early_stop() {
        let mut s = LrSchedule::new(ScheduleConfig::default());
        assert!(s.observe(1.0).improved);
        for i in 1..=4 {
            let st = s.observe(1.0);
            assert!(!st.lr_reduced, "epoch {i}");
        }
        assert!(s.observe(1.0).lr_reduced);
        assert_eq!(s.lr(), 5e-4);
        for _ in 0..4 {
            assert!(!s.observe(1.0).stop);
        }
        let st = s.observe(1.0);
        assert!(st.stop && st.lr_reduced);
        let mut s = LrSchedule::new(ScheduleConfig { lr: 2e-5, ..Default::default() });
        for _ in 0..40 {
            s.observe(1.0);
            assert!(s.lr() >= 1e-5);
        }
        assert_eq!(s.lr(), 1e-5);
        // improvement below min_delta is not an improvement
        let mut s = LrSchedule::new(ScheduleConfig::default());
        s.observe(1.0);
        assert!(!s.observe(1.0 - 5e-6).improved);
    }

    #[test]
    fn sidecar_roundtrip() {
        let p = mini();
        let mut st = AdamState::new(&p);
        st.step = 7;
        st.m.get_mut("fc.w").unwrap().data_mut()[3] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.efwt");
        st.save(&path).unwrap();
        assert_eq!(AdamState::load(&path, &p).unwrap(), st);
    }
}

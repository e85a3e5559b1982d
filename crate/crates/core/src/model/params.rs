use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{ModelConfig, ModelError, Tensor};
use crate::scalar::Real;

/// Named parameter tensors plus the config they were shaped for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    cfg: ModelConfig,
    tensors: BTreeMap<String, Tensor<T>>,
}

/// Gradient map with exactly the parameter keys.
pub type Gradients<T> = BTreeMap<String, Tensor<T>>;

/// Batch-norm running statistics are carried as parameters but not trained.
pub fn is_trainable(name: &str) -> bool {
    !(name.ends_with(".running_mean") || name.ends_with(".running_var"))
}

#[derive(Clone, Copy)]
enum Init {
    /// Xavier-uniform with the given `(fan_in, fan_out)`.
    Xavier(usize, usize),
    /// Three stacked square orthogonal blocks.
    Orthogonal3,
    /// Three stacked Xavier blocks, one per gate.
    Xavier3(usize, usize),
    Zero,
    One,
}

fn bn(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, c: usize) {
    out.push((format!("{prefix}.gamma"), vec![c], Init::One));
    out.push((format!("{prefix}.beta"), vec![c], Init::Zero));
    out.push((format!("{prefix}.running_mean"), vec![c], Init::Zero));
    out.push((format!("{prefix}.running_var"), vec![c], Init::One));
}

fn conv1x1(out: &mut Vec<(String, Vec<usize>, Init)>, prefix: &str, ci: usize, co: usize) {
    out.push((format!("{prefix}.w"), vec![co, ci], Init::Xavier(ci, co)));
    out.push((format!("{prefix}.b"), vec![co], Init::Zero));
}

fn layout(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>, Init)>, ModelError> {
    let s = cfg.shapes()?;
    let (kf, kt) = (cfg.kernel_feature, cfg.kernel_time);
    let mut out = Vec::new();
    for e in s.encoder.iter().chain(std::iter::once(&s.echo_encoder)) {
        let n = &e.name;
        out.push((format!("{n}.dw"), vec![e.in_channels, kf, kt], Init::Xavier(kf * kt, kf * kt)));
        conv1x1(&mut out, &format!("{n}.pw"), e.in_channels, e.out_channels);
        bn(&mut out, &format!("{n}.bn"), e.out_channels);
    }
    let h = cfg.gru_units;
    out.push(("gru.w_ih".into(), vec![3 * h, s.bottleneck_width], Init::Xavier3(s.bottleneck_width, h)));
    out.push(("gru.w_hh".into(), vec![3 * h, h], Init::Orthogonal3));
    out.push(("gru.b".into(), vec![3 * h], Init::Zero));
    conv1x1(&mut out, "fc", h, cfg.fc_units);
    bn(&mut out, "fc.bn", cfg.fc_units);
    let r = cfg.feature_stride;
    for d in &s.decoder {
        let n = &d.name;
        conv1x1(&mut out, &format!("{n}.skip"), d.skip_channels, d.skip_channels);
        bn(&mut out, &format!("{n}.skip.bn"), d.skip_channels);
        conv1x1(&mut out, &format!("{n}.sub"), d.in_channels + d.skip_channels, d.out_channels * r);
        bn(&mut out, &format!("{n}.bn"), d.out_channels);
        if d.residual {
            conv1x1(&mut out, &format!("{n}.res1"), d.out_channels, d.out_channels);
            conv1x1(&mut out, &format!("{n}.res2"), d.out_channels, d.out_channels);
        }
    }
    out.push(("out.w".into(), vec![cfg.out_bands, cfg.in_features], Init::Xavier(cfg.in_features, cfg.out_bands)));
    out.push(("out.b".into(), vec![cfg.out_bands], Init::Zero));
    Ok(out)
}

/// Every tensor name and shape a config requires, in ledger order.
pub fn param_shapes(cfg: &ModelConfig) -> Result<Vec<(String, Vec<usize>)>, ModelError> {
    Ok(layout(cfg)?.into_iter().map(|(n, s, _)| (n, s)).collect())
}

fn xavier(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let u = Uniform::new_inclusive(-a, a);
    (0..n).map(|_| u.sample(rng)).collect()
}

/// Row-orthonormal `n×n` block by modified Gram–Schmidt on a Gaussian draw.
fn orthogonal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    loop {
        let mut m: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(rng)).collect();
        let mut ok = true;
        for i in 0..n {
            for j in 0..i {
                let d: f64 = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum();
                for k in 0..n {
                    m[i * n + k] -= d * m[j * n + k];
                }
            }
            let norm = (0..n).map(|k| m[i * n + k].powi(2)).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            for k in 0..n {
                m[i * n + k] /= norm;
            }
        }
        if ok {
            return m;
        }
    }
}

/// Deterministic initialization from `seed`.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, init) in layout(cfg)? {
        let n: usize = shape.iter().product();
        let vals = match init {
            Init::Xavier(fi, fo) => xavier(&mut rng, n, fi, fo),
            Init::Xavier3(fi, fo) => (0..3).flat_map(|_| xavier(&mut rng, n / 3, fi, fo)).collect(),
            Init::Orthogonal3 => (0..3).flat_map(|_| orthogonal(&mut rng, shape[1])).collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        tensors.insert(name, Tensor::from_vec(&shape, vals.into_iter().map(T::lit).collect()));
    }
    Ok(ModelParams { cfg: cfg.clone(), tensors })
}

impl<T: Real> ModelParams<T> {
    /// Assemble from loaded tensors, checking names and shapes against `cfg`.
    pub fn from_tensors(cfg: &ModelConfig, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self, ModelError> {
        let want = param_shapes(cfg)?;
        if want.len() != tensors.len() {
            return Err(ModelError::Shape(format!("expected {} tensors, got {}", want.len(), tensors.len())));
        }
        for (name, shape) in &want {
            let t = tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Shape(format!("`{name}` has shape {:?}, config needs {shape:?}", t.shape())));
            }
        }
        Ok(Self { cfg: cfg.clone(), tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>, ModelError> {
        self.tensors.get(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    /// Panicking accessor for internal use where the layout is known valid.
    pub(crate) fn p(&self, name: &str) -> &Tensor<T> {
        self.tensors.get(name).unwrap_or_else(|| panic!("missing parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>, ModelError> {
        self.tensors.get_mut(name).ok_or_else(|| ModelError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn zeros_like(&self) -> Gradients<T> {
        self.tensors.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams { cfg: self.cfg.clone(), tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_and_shaped() {
        let cfg = ModelConfig::default();
        let a = init_params::<f64>(&cfg, 7).unwrap();
        let b = init_params::<f64>(&cfg, 7).unwrap();
        let c = init_params::<f64>(&cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, shape) in param_shapes(&cfg).unwrap() {
            assert_eq!(a.get(&name).unwrap().shape(), shape.as_slice());
        }
        assert!(a.get("fc.bn.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("gru.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn recurrent_blocks_are_orthogonal() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 3).unwrap();
        let w = p.get("gru.w_hh").unwrap();
        let h = cfg.gru_units;
        for g in 0..3 {
            let blk = &w.data()[g * h * h..][..h * h];
            for i in (0..h).step_by(37) {
                for j in (0..h).step_by(41) {
                    let d: f64 = (0..h).map(|k| blk[i * h + k] * blk[j * h + k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((d - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn xavier_bound_respected() {
        let cfg = ModelConfig::default();
        let p = init_params::<f64>(&cfg, 1).unwrap();
        let bound = (6.0f64 / (112.0 + 100.0)).sqrt();
        assert!(p.get("out.w").unwrap().data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn from_tensors_rejects_mismatch() {
        let cfg = ModelConfig::default();
        let p = init_params::<f32>(&cfg, 1).unwrap();
        let mut t = p.tensors().clone();
        t.insert("out.b".into(), Tensor::zeros(&[99]));
        assert!(matches!(ModelParams::from_tensors(&cfg, t), Err(ModelError::Shape(_))));
        let mut t = p.tensors().clone();
        t.remove("out.b");
        assert!(ModelParams::from_tensors(&cfg, t).is_err());
    }
}

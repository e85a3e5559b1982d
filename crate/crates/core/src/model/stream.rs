use super::gru::GruWeights;
use super::{ops, ModelConfig, ModelError, ModelParams, Tensor};
use crate::scalar::Real;

/// Per-stream recurrent and convolution context for frame inference.
///
/// Each encoder layer keeps its last `kernel_time - 1` input columns; the
/// GRU keeps its hidden vector. Decoder convolutions are 1×1 and stateless.
#[derive(Debug, Clone, Default)]
pub struct StreamState<T> {
    cfg: Option<ModelConfig>,
    /// `enc0..encL-1`, then the echo branch; each `[1, C_in, F_in, kt-1]`.
    history: Vec<Tensor<T>>,
    hidden: Vec<T>,
    frames: u64,
}

impl<T: Real> StreamState<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self, ModelError> {
        let s = cfg.shapes()?;
        let lag = cfg.kernel_time - 1;
        let history = s
            .encoder
            .iter()
            .chain(std::iter::once(&s.echo_encoder))
            .map(|e| Tensor::zeros(&[1, e.in_channels, e.in_features, lag]))
            .collect();
        Ok(Self { cfg: Some(cfg.clone()), history, hidden: vec![T::zero(); cfg.gru_units], frames: 0 })
    }

    /// Back to sequence-start behavior.
    pub fn reset(&mut self) {
        for h in &mut self.history {
            h.data_mut().fill(T::zero());
        }
        self.hidden.fill(T::zero());
        self.frames = 0;
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn hidden(&self) -> &[T] {
        &self.hidden
    }
}

/// Column `x` (`[1, C, F, 1]`) appended to the layer history window.
fn window<T: Real>(hist: &Tensor<T>, x: &Tensor<T>) -> Tensor<T> {
    let s = hist.shape();
    let (c, f, lag) = (s[1], s[2], s[3]);
    let kt = lag + 1;
    let mut w = Tensor::zeros(&[1, c, f, kt]);
    for row in 0..c * f {
        let dst = &mut w.data_mut()[row * kt..][..kt];
        dst[..lag].copy_from_slice(&hist.data()[row * lag..][..lag]);
        dst[lag] = x.data()[row];
    }
    w
}

fn shift_in<T: Real>(hist: &mut Tensor<T>, win: &Tensor<T>) {
    let s = hist.shape().to_vec();
    let (rows, lag) = (s[1] * s[2], s[3]);
    let kt = lag + 1;
    for row in 0..rows {
        let src = &win.data()[row * kt + 1..][..lag];
        hist.data_mut()[row * lag..][..lag].copy_from_slice(src);
    }
}

fn last_column<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (c, f, t) = (s[1], s[2], s[3]);
    Tensor::from_vec(&[1, c, f, 1], (0..c * f).map(|r| x.data()[r * t + t - 1]).collect())
}

fn bn_elu<T: Real>(p: &ModelParams<T>, prefix: &str, x: &Tensor<T>) -> Tensor<T> {
    let z = ops::batchnorm_eval(
        x,
        p.p(&format!("{prefix}.gamma")),
        p.p(&format!("{prefix}.beta")),
        p.p(&format!("{prefix}.running_mean")),
        p.p(&format!("{prefix}.running_var")),
    );
    ops::elu(&z)
}

fn conv1x1<T: Real>(p: &ModelParams<T>, prefix: &str, x: &Tensor<T>) -> Tensor<T> {
    ops::pointwise_forward(x, p.p(&format!("{prefix}.w")), p.p(&format!("{prefix}.b")))
}

fn ds_step<T: Real>(p: &ModelParams<T>, name: &str, hist: &mut Tensor<T>, x: &Tensor<T>, stride: usize) -> Tensor<T> {
    let win = window(hist, x);
    let dw = last_column(&ops::depthwise_forward(&win, p.p(&format!("{name}.dw")), stride));
    shift_in(hist, &win);
    bn_elu(p, &format!("{name}.bn"), &conv1x1(p, &format!("{name}.pw"), &dw))
}

/// Advance one frame with inference-mode batch-norm; returns the band gains.
pub fn forward_frame<T: Real>(p: &ModelParams<T>, state: &mut StreamState<T>, feat_mic: &[T], feat_echo: &[T]) -> Result<Vec<T>, ModelError> {
    let cfg = p.config();
    match &state.cfg {
        Some(c) if c == cfg => {}
        _ => return Err(ModelError::Uninitialized),
    }
    let f0 = cfg.in_features;
    if feat_mic.len() != f0 || feat_echo.len() != f0 {
        return Err(ModelError::Shape(format!("frame features must have length {f0}, got {} and {}", feat_mic.len(), feat_echo.len())));
    }
    if feat_mic.iter().chain(feat_echo).any(|v| !v.is_finite()) {
        return Err(ModelError::Shape("frame features contain non-finite values".into()));
    }
    let ledger = cfg.shapes()?;
    let l = ledger.encoder.len();
    let stride = cfg.feature_stride;
    let mic = Tensor::from_vec(&[1, 1, f0, 1], feat_mic.to_vec());
    let echo = Tensor::from_vec(&[1, 1, f0, 1], feat_echo.to_vec());
    let echo_y = ds_step(p, "echo_enc", &mut state.history[l], &echo, stride);
    let mut enc: Vec<Tensor<T>> = Vec::with_capacity(l);
    for i in 0..l {
        let x = match i {
            0 => mic.clone(),
            1 => ops::concat_channels(&enc[0], &echo_y),
            _ => enc[i - 1].clone(),
        };
        let y = ds_step(p, &format!("enc{i}"), &mut state.history[i], &x, stride);
        enc.push(y);
    }
    let gw = GruWeights { w_ih: p.p("gru.w_ih"), w_hh: p.p("gru.w_hh"), b: p.p("gru.b") };
    let h = gw.step(enc[l - 1].data(), &state.hidden);
    state.hidden.copy_from_slice(&h);
    let fc = bn_elu(p, "fc.bn", &conv1x1(p, "fc", &Tensor::from_vec(&[1, cfg.gru_units, 1, 1], h)));
    let f_last = *ledger.feature_sizes.last().unwrap();
    let mut d = ops::reshape(fc, &[1, ledger.decoder_input_channels, f_last, 1]);
    for ds in &ledger.decoder {
        let n = &ds.name;
        let skip = bn_elu(p, &format!("{n}.skip.bn"), &conv1x1(p, &format!("{n}.skip"), &enc[ds.skip_from]));
        let cat = ops::concat_channels(&d, &skip);
        let up = ops::pixel_shuffle(&conv1x1(p, &format!("{n}.sub"), &cat), stride, ds.out_features);
        let v = bn_elu(p, &format!("{n}.bn"), &up);
        d = if ds.residual {
            let r1 = ops::elu(&conv1x1(p, &format!("{n}.res1"), &v));
            ops::add(&v, &conv1x1(p, &format!("{n}.res2"), &r1))
        } else {
            v
        };
    }
    let out = conv1x1(p, "out", &ops::reshape(d, &[1, f0, 1, 1]));
    state.frames += 1;
    Ok(out.data().iter().map(|&v| ops::sigmoid(v)).collect())
}

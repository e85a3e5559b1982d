use super::gru::{gru_backward, gru_forward, GruCache, GruWeights};
use super::ops::{self, BnCache};
use super::{Gradients, ModelError, ModelParams, Tensor};
use crate::scalar::Real;

/// Which statistics batch-norm layers normalize with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; required for [`backward`].
    Train,
    /// Running statistics; frame-causal and used for streaming.
    Eval,
}

#[derive(Debug, Clone)]
struct NormAct<T> {
    bn: Option<BnCache<T>>,
    y: Tensor<T>,
}

#[derive(Debug, Clone)]
struct DsCache<T> {
    x: Tensor<T>,
    dw: Tensor<T>,
    out: NormAct<T>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    skip_in: Tensor<T>,
    skip: NormAct<T>,
    cat: Tensor<T>,
    in_channels: usize,
    in_features: usize,
    up: NormAct<T>,
    /// `(r1 = elu(res1(v)))` when the module carries a residual block.
    res: Option<Tensor<T>>,
}

/// Intermediates of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: BnMode,
    enc: Vec<DsCache<T>>,
    echo: DsCache<T>,
    gru_in_shape: Vec<usize>,
    gru: GruCache<T>,
    gru_out: Tensor<T>,
    fc: NormAct<T>,
    dec: Vec<DecCache<T>>,
    out_in: Tensor<T>,
    gains: Tensor<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn mode(&self) -> BnMode {
        self.mode
    }

    /// `[B, bands, 1, T]`
    pub fn gains(&self) -> &Tensor<T> {
        &self.gains
    }

    /// Batch mean and biased variance of every batch-norm layer, keyed by
    /// the layer prefix (`enc0.bn`, `fc.bn`, …). Empty in eval mode.
    pub fn batch_stats(&self) -> Vec<(String, Vec<T>, Vec<T>)> {
        let mut out = Vec::new();
        let mut push = |name: String, na: &NormAct<T>| {
            if let Some(c) = &na.bn {
                out.push((name, c.mean.clone(), c.var.clone()));
            }
        };
        for (i, e) in self.enc.iter().enumerate() {
            push(format!("enc{i}.bn"), &e.out);
        }
        push("echo_enc.bn".into(), &self.echo.out);
        push("fc.bn".into(), &self.fc);
        for (i, d) in self.dec.iter().enumerate() {
            push(format!("dec{i}.skip.bn"), &d.skip);
            push(format!("dec{i}.bn"), &d.up);
        }
        out
    }
}

fn norm_act<T: Real>(p: &ModelParams<T>, prefix: &str, x: &Tensor<T>, mode: BnMode) -> NormAct<T> {
    let (g, b) = (p.p(&format!("{prefix}.gamma")), p.p(&format!("{prefix}.beta")));
    let (z, bn) = match mode {
        BnMode::Train => {
            let (z, c) = ops::batchnorm_train(x, g, b);
            (z, Some(c))
        }
        BnMode::Eval => {
            let rm = p.p(&format!("{prefix}.running_mean"));
            let rv = p.p(&format!("{prefix}.running_var"));
            (ops::batchnorm_eval(x, g, b, rm, rv), None)
        }
    };
    NormAct { bn, y: ops::elu(&z) }
}

fn norm_act_backward<T: Real>(p: &ModelParams<T>, prefix: &str, c: &NormAct<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>, ModelError> {
    let bn = c.bn.as_ref().ok_or(ModelError::NotTrainingCache)?;
    let dz = ops::elu_backward(&c.y, dy);
    let (dx, dg, db) = ops::batchnorm_backward(bn, p.p(&format!("{prefix}.gamma")), &dz);
    accumulate(grads, &format!("{prefix}.gamma"), &dg);
    accumulate(grads, &format!("{prefix}.beta"), &db);
    Ok(dx)
}

fn accumulate<T: Real>(grads: &mut Gradients<T>, name: &str, g: &Tensor<T>) {
    let slot = grads.get_mut(name).unwrap_or_else(|| panic!("no gradient slot `{name}`"));
    ops::add_assign(slot, g);
}

fn conv1x1<T: Real>(p: &ModelParams<T>, prefix: &str, x: &Tensor<T>) -> Tensor<T> {
    ops::pointwise_forward(x, p.p(&format!("{prefix}.w")), p.p(&format!("{prefix}.b")))
}

fn conv1x1_backward<T: Real>(p: &ModelParams<T>, prefix: &str, x: &Tensor<T>, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Tensor<T> {
    let (dx, dw, db) = ops::pointwise_backward(x, p.p(&format!("{prefix}.w")), dy);
    accumulate(grads, &format!("{prefix}.w"), &dw);
    accumulate(grads, &format!("{prefix}.b"), &db);
    dx
}

fn ds_forward<T: Real>(p: &ModelParams<T>, name: &str, x: &Tensor<T>, stride: usize, mode: BnMode) -> DsCache<T> {
    let dw = ops::depthwise_forward(x, p.p(&format!("{name}.dw")), stride);
    let pw = conv1x1(p, &format!("{name}.pw"), &dw);
    let out = norm_act(p, &format!("{name}.bn"), &pw, mode);
    DsCache { x: x.clone(), dw, out }
}

fn ds_backward<T: Real>(p: &ModelParams<T>, name: &str, c: &DsCache<T>, stride: usize, dy: &Tensor<T>, grads: &mut Gradients<T>) -> Result<Tensor<T>, ModelError> {
    let dpw = norm_act_backward(p, &format!("{name}.bn"), &c.out, dy, grads)?;
    let ddw = conv1x1_backward(p, &format!("{name}.pw"), &c.dw, &dpw, grads);
    let (dx, dwk) = ops::depthwise_backward(&c.x, p.p(&format!("{name}.dw")), stride, &ddw);
    accumulate(grads, &format!("{name}.dw"), &dwk);
    Ok(dx)
}

fn check_input<T: Real>(x: &Tensor<T>, f: usize, what: &str) -> Result<(), ModelError> {
    let s = x.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != f || s[3] == 0 || s[0] == 0 {
        return Err(ModelError::Shape(format!("{what} features must be [B, 1, {f}, T>=1], got {s:?}")));
    }
    if !x.is_finite() {
        return Err(ModelError::Shape(format!("{what} features contain non-finite values")));
    }
    Ok(())
}

/// Batched forward over `[B, 1, in_features, T]` microphone and echo
/// features. Gains are `[B, out_bands, 1, T]` in `(0, 1)`.
pub fn forward_batch<T: Real>(p: &ModelParams<T>, mic: &Tensor<T>, echo: &Tensor<T>, mode: BnMode) -> Result<ForwardCache<T>, ModelError> {
    let cfg = p.config();
    let ledger = cfg.shapes()?;
    check_input(mic, cfg.in_features, "microphone")?;
    check_input(echo, cfg.in_features, "echo")?;
    if mic.shape() != echo.shape() {
        return Err(ModelError::Shape(format!("branch shapes differ: {:?} vs {:?}", mic.shape(), echo.shape())));
    }
    let (b, t) = (mic.shape()[0], mic.shape()[3]);
    let stride = cfg.feature_stride;
    let echo_c = ds_forward(p, "echo_enc", echo, stride, mode);
    let mut enc: Vec<DsCache<T>> = Vec::with_capacity(ledger.encoder.len());
    for i in 0..ledger.encoder.len() {
        let x = match i {
            0 => mic.clone(),
            1 => ops::concat_channels(&enc[0].out.y, &echo_c.out.y),
            _ => enc[i - 1].out.y.clone(),
        };
        enc.push(ds_forward(p, &format!("enc{i}"), &x, stride, mode));
    }
    let last = &enc.last().unwrap().out.y;
    let gru_in_shape = vec![b, ledger.bottleneck_width, 1, t];
    let gru_in = ops::reshape(last.clone(), &gru_in_shape);
    let gw = GruWeights { w_ih: p.p("gru.w_ih"), w_hh: p.p("gru.w_hh"), b: p.p("gru.b") };
    let (gru_out, gru) = gru_forward(&gw, &gru_in);
    let fc_pre = conv1x1(p, "fc", &gru_out);
    let fc = norm_act(p, "fc.bn", &fc_pre, mode);
    let f_last = *ledger.feature_sizes.last().unwrap();
    let mut d = ops::reshape(fc.y.clone(), &[b, ledger.decoder_input_channels, f_last, t]);
    let mut dec = Vec::with_capacity(ledger.decoder.len());
    for ds in &ledger.decoder {
        let n = &ds.name;
        let skip_in = enc[ds.skip_from].out.y.clone();
        let skip_pre = conv1x1(p, &format!("{n}.skip"), &skip_in);
        let skip = norm_act(p, &format!("{n}.skip.bn"), &skip_pre, mode);
        let cat = ops::concat_channels(&d, &skip.y);
        let sub = conv1x1(p, &format!("{n}.sub"), &cat);
        let shuffled = ops::pixel_shuffle(&sub, stride, ds.out_features);
        let up = norm_act(p, &format!("{n}.bn"), &shuffled, mode);
        let (res, y) = if ds.residual {
            let r1 = ops::elu(&conv1x1(p, &format!("{n}.res1"), &up.y));
            let r2 = conv1x1(p, &format!("{n}.res2"), &r1);
            (Some(r1), ops::add(&up.y, &r2))
        } else {
            (None, up.y.clone())
        };
        dec.push(DecCache { skip_in, skip, cat, in_channels: ds.in_channels, in_features: ds.in_features, up, res });
        d = y;
    }
    let out_in = ops::reshape(d, &[b, cfg.in_features, 1, t]);
    let mut gains = conv1x1(p, "out", &out_in);
    for v in gains.data_mut() {
        *v = ops::sigmoid(*v);
    }
    Ok(ForwardCache { mode, enc, echo: echo_c, gru_in_shape, gru, gru_out, fc, dec, out_in, gains })
}

/// Reverse pass for a training-mode forward. `dgains` is the loss
/// gradient w.r.t. the gains, shaped like [`ForwardCache::gains`].
pub fn backward<T: Real>(p: &ModelParams<T>, cache: &ForwardCache<T>, dgains: &Tensor<T>) -> Result<Gradients<T>, ModelError> {
    if cache.mode != BnMode::Train {
        return Err(ModelError::NotTrainingCache);
    }
    if dgains.shape() != cache.gains.shape() {
        return Err(ModelError::Shape(format!("gain gradient {:?} vs gains {:?}", dgains.shape(), cache.gains.shape())));
    }
    let cfg = p.config();
    let ledger = cfg.shapes()?;
    let stride = cfg.feature_stride;
    let mut grads = p.zeros_like();
    let (b, t) = (dgains.shape()[0], dgains.shape()[3]);

    let mut dlogit = dgains.clone();
    for (d, &g) in dlogit.data_mut().iter_mut().zip(cache.gains.data()) {
        *d *= g * (T::one() - g);
    }
    let dout_in = conv1x1_backward(p, "out", &cache.out_in, &dlogit, &mut grads);
    let mut dd = ops::reshape(dout_in, &[b, 1, cfg.in_features, t]);

    let mut denc: Vec<Option<Tensor<T>>> = vec![None; ledger.encoder.len()];
    for (ds, dc) in ledger.decoder.iter().zip(&cache.dec).rev() {
        let n = &ds.name;
        let mut dup = dd.clone();
        if let Some(r1) = &dc.res {
            let dr1 = conv1x1_backward(p, &format!("{n}.res2"), r1, &dd, &mut grads);
            let dr1_pre = ops::elu_backward(r1, &dr1);
            let dv = conv1x1_backward(p, &format!("{n}.res1"), &dc.up.y, &dr1_pre, &mut grads);
            ops::add_assign(&mut dup, &dv);
        }
        let dshuf = norm_act_backward(p, &format!("{n}.bn"), &dc.up, &dup, &mut grads)?;
        let dsub = ops::pixel_shuffle_backward(&dshuf, stride, dc.in_features);
        let dcat = conv1x1_backward(p, &format!("{n}.sub"), &dc.cat, &dsub, &mut grads);
        let (dprev, dskip) = ops::split_channels(&dcat, dc.in_channels);
        let dskip_pre = norm_act_backward(p, &format!("{n}.skip.bn"), &dc.skip, &dskip, &mut grads)?;
        let dskip_in = conv1x1_backward(p, &format!("{n}.skip"), &dc.skip_in, &dskip_pre, &mut grads);
        match &mut denc[ds.skip_from] {
            Some(acc) => ops::add_assign(acc, &dskip_in),
            slot => *slot = Some(dskip_in),
        }
        dd = dprev;
    }
    let dfc = ops::reshape(dd, &[b, cfg.fc_units, 1, t]);
    let dfc_pre = norm_act_backward(p, "fc.bn", &cache.fc, &dfc, &mut grads)?;
    let dgru_out = conv1x1_backward(p, "fc", &cache.gru_out, &dfc_pre, &mut grads);
    let gw = GruWeights { w_ih: p.p("gru.w_ih"), w_hh: p.p("gru.w_hh"), b: p.p("gru.b") };
    let gg = gru_backward(&gw, &cache.gru, &dgru_out, &cache.gru_in_shape);
    accumulate(&mut grads, "gru.w_ih", &gg.dw_ih);
    accumulate(&mut grads, "gru.w_hh", &gg.dw_hh);
    accumulate(&mut grads, "gru.b", &gg.db);
    let l = ledger.encoder.len();
    let last_shape = cache.enc[l - 1].out.y.shape().to_vec();
    let mut dy = ops::reshape(gg.dx, &last_shape);
    for i in (0..l).rev() {
        if let Some(extra) = denc[i].take() {
            ops::add_assign(&mut dy, &extra);
        }
        let dx = ds_backward(p, &format!("enc{i}"), &cache.enc[i], stride, &dy, &mut grads)?;
        match i {
            0 => {}
            1 => {
                let (dmic0, decho) = ops::split_channels(&dx, cfg.enc_channels[0]);
                ds_backward(p, "echo_enc", &cache.echo, stride, &decho, &mut grads)?;
                dy = dmic0;
                continue;
            }
            _ => {}
        }
        dy = dx;
    }
    for (name, g) in &grads {
        if !g.is_finite() {
            return Err(ModelError::NonFinite(name.clone()));
        }
    }
    Ok(grads)
}

/// Whole-sequence forward over `[T, in_features]` features; returns
/// `[T, out_bands]` gains.
pub fn forward_sequence<T: Real>(p: &ModelParams<T>, mic: &Tensor<T>, echo: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>, ModelError> {
    let cfg = p.config();
    let to_bcft = |x: &Tensor<T>, what: &str| -> Result<Tensor<T>, ModelError> {
        let s = x.shape();
        if s.len() != 2 || s[1] != cfg.in_features || s[0] == 0 {
            return Err(ModelError::Shape(format!("{what} features must be [T>=1, {}], got {s:?}", cfg.in_features)));
        }
        let (t, f) = (s[0], s[1]);
        let mut out = Tensor::zeros(&[1, 1, f, t]);
        for tt in 0..t {
            for ff in 0..f {
                out.data_mut()[ff * t + tt] = x.data()[tt * f + ff];
            }
        }
        Ok(out)
    };
    let c = forward_batch(p, &to_bcft(mic, "microphone")?, &to_bcft(echo, "echo")?, mode)?;
    let (nb, t) = (cfg.out_bands, mic.shape()[0]);
    let mut g = Tensor::zeros(&[t, nb]);
    for k in 0..nb {
        for tt in 0..t {
            g.data_mut()[tt * nb + k] = c.gains.data()[k * t + tt];
        }
    }
    Ok(g)
}

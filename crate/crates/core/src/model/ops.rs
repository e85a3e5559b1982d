//! Forward and reverse-mode kernels over `[batch, channel, feature, time]`
//! tensors. Each `*_backward` takes the upstream gradient of the matching
//! forward output and returns gradients for its inputs and parameters.

use super::Tensor;
use crate::scalar::Real;

pub const BN_EPS: f64 = 1e-5;

#[inline]
fn dims4<T: Real>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected a rank-4 tensor, got {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// Per-channel strided convolution along features, causal along time.
///
/// `w` has shape `[C, kf, kt]`; output features are `ceil(F / stride)` with
/// zero padding past the last input feature, and time is left-padded with
/// `kt - 1` zero frames.
pub fn depthwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
    let (b, c, fi, t) = dims4(x);
    let (kf, kt) = (w.shape()[1], w.shape()[2]);
    assert_eq!(w.shape()[0], c);
    let fo = fi.div_ceil(stride);
    let mut y = Tensor::zeros(&[b, c, fo, t]);
    let (xd, wd) = (x.data(), w.data());
    let yd = y.data_mut();
    for bb in 0..b {
        for ch in 0..c {
            let xb = &xd[(bb * c + ch) * fi * t..][..fi * t];
            let yb = &mut yd[(bb * c + ch) * fo * t..][..fo * t];
            let wc = &wd[ch * kf * kt..][..kf * kt];
            for f in 0..fo {
                let yrow = &mut yb[f * t..][..t];
                for i in 0..kf {
                    let src = f * stride + i;
                    if src >= fi {
                        break;
                    }
                    let xrow = &xb[src * t..][..t];
                    for j in 0..kt {
                        let wv = wc[i * kt + j];
                        let lag = kt - 1 - j;
                        for tt in lag..t {
                            yrow[tt] += wv * xrow[tt - lag];
                        }
                    }
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw)`.
pub fn depthwise_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let (b, c, fi, t) = dims4(x);
    let (kf, kt) = (w.shape()[1], w.shape()[2]);
    let fo = dy.shape()[2];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    let dxd = dx.data_mut();
    let dwd = dw.data_mut();
    for bb in 0..b {
        for ch in 0..c {
            let off_x = (bb * c + ch) * fi * t;
            let gb = &gd[(bb * c + ch) * fo * t..][..fo * t];
            for f in 0..fo {
                let grow = &gb[f * t..][..t];
                for i in 0..kf {
                    let src = f * stride + i;
                    if src >= fi {
                        break;
                    }
                    let xrow = &xd[off_x + src * t..][..t];
                    for j in 0..kt {
                        let lag = kt - 1 - j;
                        let wv = wd[(ch * kf + i) * kt + j];
                        let mut acc = T::zero();
                        {
                            let dxrow = &mut dxd[off_x + src * t..][..t];
                            for tt in lag..t {
                                acc += grow[tt] * xrow[tt - lag];
                                dxrow[tt - lag] += wv * grow[tt];
                            }
                        }
                        dwd[(ch * kf + i) * kt + j] += acc;
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Dot product with independent partial sums, so the loop is not bound by
/// one accumulator's add latency. Summation order is fixed.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// 1×1 convolution: `y[b, o] = Σ_i w[o, i] · x[b, i] + bias[o]`.
pub fn pointwise_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Tensor<T> {
    let (b, ci, f, t) = dims4(x);
    let co = w.shape()[0];
    assert_eq!(w.shape()[1], ci, "pointwise input channels");
    let n = f * t;
    let mut y = Tensor::zeros(&[b, co, f, t]);
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    let yd = y.data_mut();
    for bb in 0..b {
        let xb = &xd[bb * ci * n..][..ci * n];
        for o in 0..co {
            let yrow = &mut yd[(bb * co + o) * n..][..n];
            yrow.fill(bd[o]);
            for i in 0..ci {
                let wv = wd[o * ci + i];
                let xrow = &xb[i * n..][..n];
                for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                    *yv += wv * xv;
                }
            }
        }
    }
    y
}

/// Returns `(dx, dw, dbias)`.
pub fn pointwise_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, ci, f, t) = dims4(x);
    let co = w.shape()[0];
    let n = f * t;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[co]);
    let (xd, wd, gd) = (x.data(), w.data(), dy.data());
    for bb in 0..b {
        let xb = &xd[bb * ci * n..][..ci * n];
        for o in 0..co {
            let grow = &gd[(bb * co + o) * n..][..n];
            db.data_mut()[o] += grow.iter().copied().sum::<T>();
            for i in 0..ci {
                let xrow = &xb[i * n..][..n];
                dw.data_mut()[o * ci + i] += dot(grow, xrow);
                let wv = wd[o * ci + i];
                let dxrow = &mut dx.data_mut()[(bb * ci + i) * n..][..n];
                for (d, &g) in dxrow.iter_mut().zip(grow) {
                    *d += wv * g;
                }
            }
        }
    }
    (dx, dw, db)
}

/// Saved quantities of a training-mode batch-norm.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub xhat: Tensor<T>,
    pub mean: Vec<T>,
    /// Biased batch variance.
    pub var: Vec<T>,
    pub inv_std: Vec<T>,
}

fn per_channel<T: Real>(x: &Tensor<T>, c: usize, mut f: impl FnMut(usize, &[T])) {
    let s = x.shape();
    let inner: usize = s[2..].iter().product();
    for bb in 0..s[0] {
        for ch in 0..c {
            f(ch, &x.data()[(bb * c + ch) * inner..][..inner]);
        }
    }
}

/// Batch-norm with statistics over batch, feature and time.
pub fn batchnorm_train<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> (Tensor<T>, BnCache<T>) {
    let s = x.shape().to_vec();
    let c = s[1];
    let count = T::from_usize_lossy(s[0] * s[2..].iter().product::<usize>());
    let mut mean = vec![T::zero(); c];
    per_channel(x, c, |ch, row| mean[ch] += row.iter().copied().sum::<T>());
    for m in &mut mean {
        *m /= count;
    }
    let mut var = vec![T::zero(); c];
    per_channel(x, c, |ch, row| {
        let m = mean[ch];
        var[ch] += row.iter().map(|&v| (v - m) * (v - m)).sum::<T>();
    });
    for v in &mut var {
        *v /= count;
    }
    let eps = T::lit(BN_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let inner: usize = s[2..].iter().product();
    let mut xhat = Tensor::zeros(&s);
    let mut y = Tensor::zeros(&s);
    for bb in 0..s[0] {
        for ch in 0..c {
            let off = (bb * c + ch) * inner;
            let (g, be) = (gamma.data()[ch], beta.data()[ch]);
            for k in off..off + inner {
                let h = (x.data()[k] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[k] = h;
                y.data_mut()[k] = g * h + be;
            }
        }
    }
    (y, BnCache { xhat, mean, var, inv_std })
}

/// Inference batch-norm from running statistics.
pub fn batchnorm_eval<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, rmean: &Tensor<T>, rvar: &Tensor<T>) -> Tensor<T> {
    let s = x.shape().to_vec();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let mut y = x.clone();
    let eps = T::lit(BN_EPS);
    for bb in 0..s[0] {
        for ch in 0..c {
            let scale = gamma.data()[ch] / (rvar.data()[ch] + eps).sqrt();
            let shift = beta.data()[ch] - rmean.data()[ch] * scale;
            for v in &mut y.data_mut()[(bb * c + ch) * inner..][..inner] {
                *v = *v * scale + shift;
            }
        }
    }
    y
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Real>(cache: &BnCache<T>, gamma: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let s = dy.shape().to_vec();
    let c = s[1];
    let inner: usize = s[2..].iter().product();
    let n = T::from_usize_lossy(s[0] * inner);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bb in 0..s[0] {
        for ch in 0..c {
            let off = (bb * c + ch) * inner;
            for k in off..off + inner {
                let g = dy.data()[k];
                dbeta[ch] += g;
                dgamma[ch] += g * cache.xhat.data()[k];
            }
        }
    }
    let mut dx = Tensor::zeros(&s);
    for bb in 0..s[0] {
        for ch in 0..c {
            let off = (bb * c + ch) * inner;
            let k0 = gamma.data()[ch] * cache.inv_std[ch] / n;
            for k in off..off + inner {
                let g = dy.data()[k];
                dx.data_mut()[k] = k0 * (n * g - dbeta[ch] - cache.xhat.data()[k] * dgamma[ch]);
            }
        }
    }
    (dx, Tensor::from_vec(&[c], dgamma), Tensor::from_vec(&[c], dbeta))
}

pub fn elu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v <= T::zero() {
            *v = v.exp_m1();
        }
    }
    y
}

/// ELU gradient expressed through the forward output `y`.
pub fn elu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (d, &yv) in dx.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *d *= yv + T::one();
        }
    }
    dx
}

pub fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Concatenate along channels.
pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, ca, f, t) = dims4(a);
    let (nb, cb, fb, tb) = dims4(b);
    assert!(n == nb && f == fb && t == tb, "concat shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    let inner = f * t;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for bb in 0..n {
        out.extend_from_slice(&a.data()[bb * ca * inner..][..ca * inner]);
        out.extend_from_slice(&b.data()[bb * cb * inner..][..cb * inner]);
    }
    Tensor::from_vec(&[n, ca + cb, f, t], out)
}

pub fn split_channels<T: Real>(x: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let (n, c, f, t) = dims4(x);
    let cb = c - ca;
    let inner = f * t;
    let mut a = Vec::with_capacity(n * ca * inner);
    let mut b = Vec::with_capacity(n * cb * inner);
    for bb in 0..n {
        let base = &x.data()[bb * c * inner..][..c * inner];
        a.extend_from_slice(&base[..ca * inner]);
        b.extend_from_slice(&base[ca * inner..]);
    }
    (Tensor::from_vec(&[n, ca, f, t], a), Tensor::from_vec(&[n, cb, f, t], b))
}

/// Channel-to-feature rearrangement: channel `c·r + q` at feature `f` moves
/// to channel `c`, feature `f·r + q`; features at or past `f_out` are cropped.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize, f_out: usize) -> Tensor<T> {
    let (n, cr, f, t) = dims4(x);
    assert_eq!(cr % r, 0, "channels not divisible by shuffle factor");
    let c = cr / r;
    assert!(f_out <= f * r, "crop target exceeds shuffled extent");
    let mut y = Tensor::zeros(&[n, c, f_out, t]);
    for bb in 0..n {
        for ch in 0..c {
            for q in 0..r {
                let src_c = ch * r + q;
                for ff in 0..f {
                    let dst_f = ff * r + q;
                    if dst_f >= f_out {
                        continue;
                    }
                    let src = &x.data()[((bb * cr + src_c) * f + ff) * t..][..t];
                    y.data_mut()[((bb * c + ch) * f_out + dst_f) * t..][..t].copy_from_slice(src);
                }
            }
        }
    }
    y
}

pub fn pixel_shuffle_backward<T: Real>(dy: &Tensor<T>, r: usize, f_in: usize) -> Tensor<T> {
    let (n, c, f_out, t) = dims4(dy);
    let mut dx = Tensor::zeros(&[n, c * r, f_in, t]);
    for bb in 0..n {
        for ch in 0..c {
            for q in 0..r {
                for ff in 0..f_in {
                    let dst_f = ff * r + q;
                    if dst_f >= f_out {
                        continue;
                    }
                    let src = &dy.data()[((bb * c + ch) * f_out + dst_f) * t..][..t];
                    dx.data_mut()[((bb * c * r + ch * r + q) * f_in + ff) * t..][..t].copy_from_slice(src);
                }
            }
        }
    }
    dx
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    let mut y = a.clone();
    for (v, &w) in y.data_mut().iter_mut().zip(b.data()) {
        *v += w;
    }
    y
}

pub fn add_assign<T: Real>(acc: &mut Tensor<T>, b: &Tensor<T>) {
    assert_eq!(acc.shape(), b.shape());
    for (v, &w) in acc.data_mut().iter_mut().zip(b.data()) {
        *v += w;
    }
}

pub fn reshape<T: Real>(x: Tensor<T>, shape: &[usize]) -> Tensor<T> {
    let shape = shape.to_vec();
    let data = x.data().to_vec();
    Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect())
    }

    fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
    }

    /// Checks `<dy, J·v>` against `<J^T dy, v>` via central differences.
    fn fd_dir(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>, dy: &Tensor<f64>, analytic: &Tensor<f64>) {
        let v = rand_t(x.shape(), 99);
        let h = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for ((p, m), &d) in xp.data_mut().iter_mut().zip(xm.data_mut()).zip(v.data()) {
            *p += h * d;
            *m -= h * d;
        }
        let num = (dot(&f(&xp), dy) - dot(&f(&xm), dy)) / (2.0 * h);
        let ana = dot(analytic, &v);
        assert!((num - ana).abs() <= 1e-6 * (1.0 + ana.abs()), "num {num} vs analytic {ana}");
    }

    #[test]
    fn depthwise_matches_direct_definition() {
        let x = rand_t(&[2, 3, 7, 5], 1);
        let w = rand_t(&[3, 4, 3], 2);
        let y = depthwise_forward(&x, &w, 4);
        assert_eq!(y.shape(), &[2, 3, 2, 5]);
        let at = |b: usize, c: usize, f: usize, t: isize| -> f64 {
            if f >= 7 || t < 0 { 0.0 } else { x.data()[((b * 3 + c) * 7 + f) * 5 + t as usize] }
        };
        for b in 0..2 {
            for c in 0..3 {
                for fo in 0..2 {
                    for t in 0..5 {
                        let mut s = 0.0;
                        for i in 0..4 {
                            for j in 0..3 {
                                s += w.data()[(c * 4 + i) * 3 + j] * at(b, c, fo * 4 + i, t as isize - 2 + j as isize);
                            }
                        }
                        let got = y.data()[((b * 3 + c) * 2 + fo) * 5 + t];
                        assert!((got - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_gradients() {
        let x = rand_t(&[2, 3, 7, 5], 3);
        let w = rand_t(&[3, 4, 3], 4);
        let dy = rand_t(&[2, 3, 2, 5], 5);
        let (dx, dw) = depthwise_backward(&x, &w, 4, &dy);
        fd_dir(|x| depthwise_forward(x, &w, 4), &x, &dy, &dx);
        fd_dir(|w| depthwise_forward(&x, w, 4), &w, &dy, &dw);
    }

    #[test]
    fn pointwise_gradients() {
        let x = rand_t(&[2, 3, 4, 5], 6);
        let w = rand_t(&[5, 3], 7);
        let b = rand_t(&[5], 8);
        let dy = rand_t(&[2, 5, 4, 5], 9);
        let (dx, dw, db) = pointwise_backward(&x, &w, &dy);
        fd_dir(|x| pointwise_forward(x, &w, &b), &x, &dy, &dx);
        fd_dir(|w| pointwise_forward(&x, w, &b), &w, &dy, &dw);
        fd_dir(|b| pointwise_forward(&x, &w, b), &b, &dy, &db);
    }

    #[test]
    fn batchnorm_gradients_and_eval_consistency() {
        let x = rand_t(&[2, 3, 4, 5], 10);
        let g = rand_t(&[3], 11);
        let be = rand_t(&[3], 12);
        let dy = rand_t(&[2, 3, 4, 5], 13);
        let (y, cache) = batchnorm_train(&x, &g, &be);
        let (dx, dg, db) = batchnorm_backward(&cache, &g, &dy);
        fd_dir(|x| batchnorm_train(x, &g, &be).0, &x, &dy, &dx);
        fd_dir(|g| batchnorm_train(&x, g, &be).0, &g, &dy, &dg);
        fd_dir(|b| batchnorm_train(&x, &g, b).0, &be, &dy, &db);
        let rm = Tensor::from_vec(&[3], cache.mean.clone());
        let rv = Tensor::from_vec(&[3], cache.var.clone());
        let ye = batchnorm_eval(&x, &g, &be, &rm, &rv);
        for (a, b) in y.data().iter().zip(ye.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn elu_and_shuffle_roundtrips() {
        let x = rand_t(&[1, 2, 3, 4], 14);
        let dy = rand_t(&[1, 2, 3, 4], 15);
        let y = elu(&x);
        fd_dir(elu, &x, &dy, &elu_backward(&y, &dy));
        let x = rand_t(&[2, 8, 2, 3], 16);
        let y = pixel_shuffle(&x, 4, 7);
        assert_eq!(y.shape(), &[2, 2, 7, 3]);
        // channel 1*4+3 at feature 1 -> channel 1, feature 7 is cropped; feature 6 = (1, q=2)
        assert_eq!(y.data()[((2 + 1) * 7 + 6) * 3], x.data()[((8 + 6) * 2 + 1) * 3]);
        let dy = rand_t(&[2, 2, 7, 3], 17);
        fd_dir(|x| pixel_shuffle(x, 4, 7), &x, &dy, &pixel_shuffle_backward(&dy, 4, 2));
        let a = rand_t(&[2, 3, 2, 2], 18);
        let b = rand_t(&[2, 1, 2, 2], 19);
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!((a2, b2), (a, b));
    }
}

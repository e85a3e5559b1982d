//! Single-layer GRU, gate order `r, z, n`, one bias per gate:
//!
//! ```text
//! r = σ(W_ir x + W_hr h + b_r)
//! z = σ(W_iz x + W_hz h + b_z)
//! n = tanh(W_in x + b_n + r ⊙ (W_hn h))
//! h' = (1 − z) ⊙ n + z ⊙ h
//! ```

use super::ops::{dot, sigmoid};
use super::Tensor;
use crate::scalar::Real;

pub(crate) struct GruWeights<'a, T> {
    pub w_ih: &'a Tensor<T>,
    pub w_hh: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
}

impl<T: Real> GruWeights<'_, T> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape()[1]
    }

    pub fn input(&self) -> usize {
        self.w_ih.shape()[1]
    }

    /// `W_ih x + b`, length `3H`.
    fn input_proj(&self, x: &[T], out: &mut [T]) {
        let din = self.input();
        let (w, b) = (self.w_ih.data(), self.b.data());
        for (k, o) in out.iter_mut().enumerate() {
            *o = b[k] + dot(&w[k * din..][..din], x);
        }
    }

    fn hidden_proj(&self, h: &[T], out: &mut [T]) {
        let hd = self.hidden();
        let w = self.w_hh.data();
        for (k, o) in out.iter_mut().enumerate() {
            *o = dot(&w[k * hd..][..hd], h);
        }
    }

    /// One recurrence step; returns `(r, z, n, hh_n)` through the scratch
    /// slices and writes the new state into `h_out`.
    fn cell(&self, xi: &[T], h: &[T], hh: &mut [T], gates: &mut [T], h_out: &mut [T]) {
        let hd = self.hidden();
        self.hidden_proj(h, hh);
        for k in 0..hd {
            let r = sigmoid(xi[k] + hh[k]);
            let z = sigmoid(xi[hd + k] + hh[hd + k]);
            let n = (xi[2 * hd + k] + r * hh[2 * hd + k]).tanh();
            gates[k] = r;
            gates[hd + k] = z;
            gates[2 * hd + k] = n;
            h_out[k] = (T::one() - z) * n + z * h[k];
        }
    }

    /// Streaming step used by frame inference.
    pub fn step(&self, x: &[T], h: &[T]) -> Vec<T> {
        let hd = self.hidden();
        let mut xi = vec![T::zero(); 3 * hd];
        let mut hh = vec![T::zero(); 3 * hd];
        let mut gates = vec![T::zero(); 3 * hd];
        let mut out = vec![T::zero(); hd];
        self.input_proj(x, &mut xi);
        self.cell(&xi, h, &mut hh, &mut gates, &mut out);
        out
    }
}

/// Everything backward needs, laid out `[b][t][..]`.
#[derive(Debug, Clone)]
pub struct GruCache<T> {
    /// Inputs, `[B][T][Din]`.
    xs: Vec<T>,
    /// Hidden states including the zero initial state, `[B][T+1][H]`.
    hs: Vec<T>,
    gates: Vec<T>,
    hh_n: Vec<T>,
    batch: usize,
    frames: usize,
}

/// `x` is `[B, Din, 1, T]`; returns `[B, H, 1, T]`.
///
/// Steps all sequences together so each recurrent weight row is loaded once
/// per frame rather than once per frame and sequence.
pub(crate) fn gru_forward<T: Real>(w: &GruWeights<'_, T>, x: &Tensor<T>) -> (Tensor<T>, GruCache<T>) {
    let s = x.shape();
    let (b, din, t) = (s[0], s[1] * s[2], s[3]);
    assert_eq!(din, w.input(), "GRU input width");
    let hd = w.hidden();
    let g3 = 3 * hd;
    let mut xs = vec![T::zero(); b * t * din];
    for bb in 0..b {
        for i in 0..din {
            for tt in 0..t {
                xs[(bb * t + tt) * din + i] = x.data()[(bb * din + i) * t + tt];
            }
        }
    }
    // input projections for every (sequence, frame) up front
    let mut xi = vec![T::zero(); b * t * g3];
    for (xrow, orow) in xs.chunks_exact(din.max(1)).zip(xi.chunks_exact_mut(g3)) {
        w.input_proj(xrow, orow);
    }
    let mut hs = vec![T::zero(); b * (t + 1) * hd];
    let mut gates = vec![T::zero(); b * t * g3];
    let mut hh_n = vec![T::zero(); b * t * hd];
    let mut hh = vec![T::zero(); b * g3];
    let wh = w.w_hh.data();
    for tt in 0..t {
        for j in 0..g3 {
            let row = &wh[j * hd..][..hd];
            for bb in 0..b {
                hh[bb * g3 + j] = dot(row, &hs[(bb * (t + 1) + tt) * hd..][..hd]);
            }
        }
        for bb in 0..b {
            let xv = &xi[(bb * t + tt) * g3..][..g3];
            let hv = &hh[bb * g3..][..g3];
            let base = bb * (t + 1) * hd;
            let (prev, next) = hs[base + tt * hd..base + (tt + 2) * hd].split_at_mut(hd);
            let g = &mut gates[(bb * t + tt) * g3..][..g3];
            for k in 0..hd {
                let r = sigmoid(xv[k] + hv[k]);
                let z = sigmoid(xv[hd + k] + hv[hd + k]);
                let n = (xv[2 * hd + k] + r * hv[2 * hd + k]).tanh();
                g[k] = r;
                g[hd + k] = z;
                g[2 * hd + k] = n;
                next[k] = (T::one() - z) * n + z * prev[k];
            }
            hh_n[(bb * t + tt) * hd..][..hd].copy_from_slice(&hv[2 * hd..]);
        }
    }
    let mut y = Tensor::zeros(&[b, hd, 1, t]);
    for bb in 0..b {
        for k in 0..hd {
            for tt in 0..t {
                y.data_mut()[(bb * hd + k) * t + tt] = hs[(bb * (t + 1) + tt + 1) * hd + k];
            }
        }
    }
    (y, GruCache { xs, hs, gates, hh_n, batch: b, frames: t })
}

pub(crate) struct GruGrads<T> {
    pub dx: Tensor<T>,
    pub dw_ih: Tensor<T>,
    pub dw_hh: Tensor<T>,
    pub db: Tensor<T>,
}

/// Backpropagation through time over the full segment.
pub(crate) fn gru_backward<T: Real>(w: &GruWeights<'_, T>, cache: &GruCache<T>, dy: &Tensor<T>, x_shape: &[usize]) -> GruGrads<T> {
    let (b, t) = (cache.batch, cache.frames);
    let (din, hd) = (w.input(), w.hidden());
    let g3 = 3 * hd;
    let mut dw_ih = vec![T::zero(); g3 * din];
    let mut dw_hh = vec![T::zero(); g3 * hd];
    let mut db = vec![T::zero(); g3];
    let mut dxs = vec![T::zero(); b * t * din];
    let (wi, wh) = (w.w_ih.data(), w.w_hh.data());
    let mut dh_next = vec![T::zero(); b * hd];
    // pre-activation gradients of every step, `[B][T][3H]`
    let mut da_all = vec![T::zero(); b * t * g3];
    let mut dhh = vec![T::zero(); b * g3];
    let one = T::one();
    for tt in (0..t).rev() {
        for bb in 0..b {
            let g = &cache.gates[(bb * t + tt) * g3..][..g3];
            let hp = &cache.hs[(bb * (t + 1) + tt) * hd..][..hd];
            let hn = &cache.hh_n[(bb * t + tt) * hd..][..hd];
            let da = &mut da_all[(bb * t + tt) * g3..][..g3];
            let dhb = &mut dhh[bb * g3..][..g3];
            let dn_b = &mut dh_next[bb * hd..][..hd];
            for k in 0..hd {
                let dh = dy.data()[(bb * hd + k) * t + tt] + dn_b[k];
                let (r, z, n) = (g[k], g[hd + k], g[2 * hd + k]);
                let dn = dh * (one - z);
                let dz = dh * (hp[k] - n);
                let dan = dn * (one - n * n);
                let dr = dan * hn[k];
                let dar = dr * r * (one - r);
                let daz = dz * z * (one - z);
                da[k] = dar;
                da[hd + k] = daz;
                da[2 * hd + k] = dan;
                dhb[k] = dar;
                dhb[hd + k] = daz;
                dhb[2 * hd + k] = dan * r;
                dn_b[k] = dh * z;
            }
        }
        for j in 0..g3 {
            let row = &wh[j * hd..][..hd];
            let drow = &mut dw_hh[j * hd..][..hd];
            for bb in 0..b {
                let gj = dhh[bb * g3 + j];
                let hp = &cache.hs[(bb * (t + 1) + tt) * hd..][..hd];
                let dn_b = &mut dh_next[bb * hd..][..hd];
                for k in 0..hd {
                    drow[k] += gj * hp[k];
                    dn_b[k] += row[k] * gj;
                }
            }
        }
    }
    for ((xv, dx), da) in cache.xs.chunks_exact(din.max(1)).zip(dxs.chunks_exact_mut(din.max(1))).zip(da_all.chunks_exact(g3)) {
        for j in 0..g3 {
            let gj = da[j];
            db[j] += gj;
            let row = &wi[j * din..][..din];
            let drow = &mut dw_ih[j * din..][..din];
            for i in 0..din {
                drow[i] += gj * xv[i];
                dx[i] += row[i] * gj;
            }
        }
    }
    let mut dx = Tensor::zeros(x_shape);
    for bb in 0..b {
        for i in 0..din {
            for tt in 0..t {
                dx.data_mut()[(bb * din + i) * t + tt] = dxs[(bb * t + tt) * din + i];
            }
        }
    }
    GruGrads {
        dx,
        dw_ih: Tensor::from_vec(w.w_ih.shape(), dw_ih),
        dw_hh: Tensor::from_vec(w.w_hh.shape(), dw_hh),
        db: Tensor::from_vec(w.b.shape(), db),
    }
}

use super::{Stage, TrainError};
use crate::scalar::Real;

pub const BCE_CLAMP: f64 = 1e-7;
/// Compression exponent applied to gains before the power-law terms.
pub const GAIN_COMPRESSION: f64 = 0.5;

fn check_gains<T: Real>(g: &[T], what: &str) -> Result<(), TrainError> {
    if let Some((i, v)) = g.iter().enumerate().find(|(_, &v)| !(v >= T::zero() && v <= T::one())) {
        return Err(TrainError::Contract(format!("{what} gain {i} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Clamped inside each logarithm, so a perfect 0/1 prediction costs exactly 0.
fn bce<T: Real>(p: T, g: T) -> T {
    let lo = T::lit(BCE_CLAMP);
    -(g * p.max(lo).ln() + (T::one() - g) * (T::one() - p).max(lo).ln())
}

/// Mean over elements of `10·d⁴ + d² + 0.01·BCE(ĝ, g)` with `d = ĝ^c − g^c`.
pub fn bark_gain_loss<T: Real>(est: &[T], target: &[T], c: T) -> Result<T, TrainError> {
    Ok(bark_gain_loss_grad(est, target, c)?.0)
}

/// Loss value and its gradient w.r.t. `est`.
pub fn bark_gain_loss_grad<T: Real>(est: &[T], target: &[T], c: T) -> Result<(T, Vec<T>), TrainError> {
    if est.len() != target.len() || est.is_empty() {
        return Err(TrainError::Contract(format!("gain lengths {} vs {}", est.len(), target.len())));
    }
    check_gains(est, "estimated")?;
    check_gains(target, "target")?;
    let n = T::from_usize_lossy(est.len());
    let (ten, two, hundredth) = (T::lit(10.0), T::lit(2.0), T::lit(0.01));
    let lo = T::lit(BCE_CLAMP);
    let tiny = T::lit(1e-12);
    let mut total = T::zero();
    let mut grad = Vec::with_capacity(est.len());
    for (&p, &g) in est.iter().zip(target) {
        let d = p.powf(c) - g.powf(c);
        let d2 = d * d;
        total += ten * d2 * d2 + d2 + hundredth * bce(p, g);
        let dpow = c * p.max(tiny).powf(c - T::one());
        let mut dp = (T::lit(40.0) * d2 * d + two * d) * dpow;
        if p > lo {
            dp -= hundredth * g / p;
        }
        if T::one() - p > lo {
            dp += hundredth * (T::one() - g) / (T::one() - p);
        }
        grad.push(dp / n);
    }
    Ok((total / n, grad))
}

/// `(1/L) Σ_l mean((e_l − ê_l)²)`.
pub fn ssl_loss<T: Real>(est: &[Vec<T>], reference: &[Vec<T>]) -> Result<T, TrainError> {
    Ok(ssl_loss_grad(est, reference)?.0)
}

/// Loss and gradient w.r.t. each estimated layer.
pub fn ssl_loss_grad<T: Real>(est: &[Vec<T>], reference: &[Vec<T>]) -> Result<(T, Vec<Vec<T>>), TrainError> {
    if est.is_empty() || est.len() != reference.len() {
        return Err(TrainError::Contract(format!("layer counts {} vs {}", est.len(), reference.len())));
    }
    let l = T::from_usize_lossy(est.len());
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(est.len());
    for (i, (e, r)) in est.iter().zip(reference).enumerate() {
        if e.len() != r.len() {
            return Err(TrainError::Contract(format!("layer {i} sizes {} vs {}", e.len(), r.len())));
        }
        if e.is_empty() {
            grads.push(Vec::new());
            continue;
        }
        let n = T::from_usize_lossy(e.len());
        let mse = e.iter().zip(r).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        total += mse / l;
        let k = T::lit(2.0) / (n * l);
        grads.push(e.iter().zip(r).map(|(&a, &b)| k * (a - b)).collect());
    }
    Ok((total, grads))
}

/// Stage 1 trains on the embedding loss alone; stage 2 on `10·L_bark + 0.5·L_ssl`.
pub fn stage_loss<T: Real>(stage: u8, l_bark: T, l_ssl: T) -> Result<T, TrainError> {
    let (wb, ws) = Stage::try_from(stage)?.weights();
    Ok(if wb == 0.0 { l_ssl } else { T::lit(wb) * l_bark + T::lit(ws) * l_ssl })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_examples() {
        let c = GAIN_COMPRESSION;
        assert_eq!(bark_gain_loss(&[1.0f64; 4], &[1.0; 4], c).unwrap(), 0.0);
        let v = bark_gain_loss(&[0.0f64], &[1.0], c).unwrap();
        assert!((v - (11.0 - 0.01 * 1e-7f64.ln())).abs() < 1e-9);
        assert!((v - 11.1612).abs() < 1e-4);
        let h = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let v = bark_gain_loss(&[0.25f64], &[0.25], c).unwrap();
        assert!((v - 0.01 * h).abs() < 1e-12);
        assert!((h - 0.5623).abs() < 1e-4);
        assert!(bark_gain_loss(&[1.2f64], &[1.0], c).is_err());
        assert!(bark_gain_loss(&[0.5f64], &[-0.1], c).is_err());
    }

    #[test]
    fn gain_loss_gradient() {
        let est = [0.1f64, 0.4, 0.75, 0.93];
        let tgt = [0.0f64, 0.5, 1.0, 0.2];
        let (_, g) = bark_gain_loss_grad(&est, &tgt, 0.5).unwrap();
        let h = 1e-6;
        for k in 0..4 {
            let mut p = est;
            p[k] += h;
            let mut m = est;
            m[k] -= h;
            let num = (bark_gain_loss(&p, &tgt, 0.5).unwrap() - bark_gain_loss(&m, &tgt, 0.5).unwrap()) / (2.0 * h);
            assert!((num - g[k]).abs() <= 1e-6 * (1.0 + num.abs()), "{k}: {num} vs {}", g[k]);
        }
    }

    #[test]
    fn ssl_and_stage() {
        let a = vec![vec![1.0f64, 2.0, 3.0]];
        let b = vec![vec![2.0f64, 3.0, 4.0]];
        assert_eq!(ssl_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(ssl_loss(&a, &b).unwrap(), 1.0);
        assert!(ssl_loss(&a, &[vec![1.0]]).is_err());
        assert_eq!(stage_loss(1, 5.0f64, 0.7).unwrap(), 0.7);
        assert_eq!(stage_loss(2, 0.1f64, 0.2).unwrap(), 10.0 * 0.1 + 0.5 * 0.2);
        assert!((stage_loss(2, 0.1f64, 0.2).unwrap() - 1.1).abs() < 1e-15);
        assert_eq!(stage_loss(2, 0.0f64, 0.0).unwrap(), 0.0);
        assert!(stage_loss(3, 0.0f64, 0.0).is_err());
    }
}

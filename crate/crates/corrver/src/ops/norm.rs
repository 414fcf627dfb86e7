//! L2 normalization and group normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Norms at or below this are treated as degenerate rather than divided by.
const L2_EPS: f32 = 1e-12;

/// Scales a vector to unit L2 norm. Returns the normalized tensor and a flag
/// that is true when the input norm underflowed; in that case the output is
/// all zeros instead of an amplified noise direction.
pub fn l2_normalize(x: &Tensor) -> (Tensor, bool) {
    let n = x.norm();
    if n <= L2_EPS {
        return (Tensor::zeros(x.shape()).expect("shape was valid"), true);
    }
    let mut out = x.clone();
    out.scale(1.0 / n);
    (out, false)
}

/// Saved intermediates from [`group_norm_forward`], consumed by the backward
/// pass.
#[derive(Debug, Clone)]
pub struct GroupNormCtx {
    shape: Vec<usize>,
    groups: usize,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}

/// Group normalization over a `[c, ...]` tensor: channels are split into
/// `groups` contiguous bands, each band is standardized over its channels and
/// all trailing axes, then scaled by `gamma` and shifted by `beta` per
/// channel.
pub fn group_norm_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
    eps: f32,
) -> Result<(Tensor, GroupNormCtx)> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "group_norm expects rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[0];
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "group_norm gamma/beta must be [{}], got {:?} and {:?}",
            c,
            gamma.shape(),
            beta.shape()
        )));
    }
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument(format!(
            "group count {} must divide {} channels",
            groups, c
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("group_norm eps must be positive, got {}", eps)));
    }
    let spatial: usize = x.shape()[1..].iter().product();
    let band = c / groups * spatial;
    let mut xhat = vec![0.0f32; x.len()];
    let mut inv_std = vec![0.0f32; groups];
    let mut y = vec![0.0f32; x.len()];
    let xd = x.data();
    for g in 0..groups {
        let seg = &xd[g * band..(g + 1) * band];
        let mut mean = 0.0f32;
        for &v in seg {
            mean += v;
        }
        mean /= band as f32;
        let mut var = 0.0f32;
        for &v in seg {
            let d = v - mean;
            var += d * d;
        }
        var /= band as f32;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[g] = istd;
        for (i, &v) in seg.iter().enumerate() {
            xhat[g * band + i] = (v - mean) * istd;
        }
    }
    for ch in 0..c {
        let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
        for i in 0..spatial {
            y[ch * spatial + i] = gm * xhat[ch * spatial + i] + bt;
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        GroupNormCtx {
            shape: x.shape().to_vec(),
            groups,
            xhat,
            inv_std,
        },
    ))
}

/// Backpropagates `dy` through group normalization, returning
/// `(dx, dgamma, dbeta)`.
pub fn group_norm_backward(
    ctx: &GroupNormCtx,
    gamma: &Tensor,
    dy: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    if dy.shape() != ctx.shape.as_slice() {
        return Err(Error::ShapeMismatch(format!(
            "group_norm_backward expects upstream {:?}, got {:?}",
            ctx.shape,
            dy.shape()
        )));
    }
    let c = ctx.shape[0];
    let spatial: usize = ctx.shape[1..].iter().product();
    let band = c / ctx.groups * spatial;
    let gd = dy.data();
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ch in 0..c {
        for i in 0..spatial {
            let idx = ch * spatial + i;
            dgamma[ch] += gd[idx] * ctx.xhat[idx];
            dbeta[ch] += gd[idx];
        }
    }
    let mut dx = vec![0.0f32; gd.len()];
    for g in 0..ctx.groups {
        // dxhat = dy * gamma; standard standardization backward:
        // dx = istd/N * (N*dxhat - sum(dxhat) - xhat * sum(dxhat*xhat)).
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for i in 0..band {
            let idx = g * band + i;
            let dxh = gd[idx] * gamma.data()[idx / spatial];
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * ctx.xhat[idx];
        }
        let n = band as f32;
        for i in 0..band {
            let idx = g * band + i;
            let dxh = gd[idx] * gamma.data()[idx / spatial];
            dx[idx] = ctx.inv_std[g] / n * (n * dxh - sum_dxhat - ctx.xhat[idx] * sum_dxhat_xhat);
        }
    }
    Ok((
        Tensor::new(&ctx.shape, dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn l2_normalize_produces_unit_norm() {
        let x = Tensor::new(&[3], vec![3.0, 0.0, 4.0]).unwrap();
        let (u, degenerate) = l2_normalize(&x);
        assert!(!degenerate);
        assert_relative_eq!(u.data()[0], 0.6, max_relative = 1e-6);
        assert_relative_eq!(u.data()[2], 0.8, max_relative = 1e-6);
        assert_relative_eq!(u.norm(), 1.0, max_relative = 1e-6);
    }

    #[test]
    fn l2_normalize_is_idempotent() {
        let x = Tensor::new(&[4], vec![0.3, -1.7, 2.2, 0.05]).unwrap();
        let (once, _) = l2_normalize(&x);
        let (twice, _) = l2_normalize(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn l2_normalize_flags_zero_vectors() {
        let x = Tensor::zeros(&[4]).unwrap();
        let (u, degenerate) = l2_normalize(&x);
        assert!(degenerate);
        assert!(u.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(
            &[4, 5],
            (0..20).map(|_| rng.random_range(-2.0..2.0f32)).collect(),
        )
        .unwrap();
        let gamma = Tensor::filled(&[4], 1.0).unwrap();
        let beta = Tensor::zeros(&[4]).unwrap();
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 2, 1e-5).unwrap();
        for g in 0..2 {
            let seg = &y.data()[g * 10..(g + 1) * 10];
            let mean: f32 = seg.iter().sum::<f32>() / 10.0;
            let var: f32 = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 10.0;
            assert!(mean.abs() < 1e-5, "group {} mean {}", g, mean);
            assert_relative_eq!(var, 1.0, max_relative = 1e-3);
        }
    }

    #[test]
    fn group_norm_applies_per_channel_affine() {
        let x = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let gamma = Tensor::new(&[2], vec![2.0, 0.5]).unwrap();
        let beta = Tensor::new(&[2], vec![10.0, -10.0]).unwrap();
        let ones = Tensor::filled(&[2], 1.0).unwrap();
        let zeros = Tensor::zeros(&[2]).unwrap();
        let (base, _) = group_norm_forward(&x, &ones, &zeros, 1, 1e-5).unwrap();
        let (y, _) = group_norm_forward(&x, &gamma, &beta, 1, 1e-5).unwrap();
        for ch in 0..2 {
            for i in 0..2 {
                let want = gamma.data()[ch] * base.at(&[ch, i]) + beta.data()[ch];
                assert_relative_eq!(y.at(&[ch, i]), want, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn group_norm_rejects_non_dividing_groups() {
        let x = Tensor::zeros(&[3, 2]).unwrap();
        let gamma = Tensor::filled(&[3], 1.0).unwrap();
        let beta = Tensor::zeros(&[3]).unwrap();
        assert!(group_norm_forward(&x, &gamma, &beta, 2, 1e-5).is_err());
        assert!(group_norm_forward(&x, &gamma, &beta, 0, 1e-5).is_err());
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let x = Tensor::new(
            &[4, 6],
            (0..24).map(|_| rng.random_range(-1.0..1.0f32)).collect(),
        )
        .unwrap();
        let gamma = Tensor::new(&[4], (0..4).map(|_| rng.random_range(0.5..1.5f32)).collect()).unwrap();
        let beta = Tensor::new(&[4], (0..4).map(|_| rng.random_range(-0.5..0.5f32)).collect()).unwrap();
        let wsum = Tensor::new(&[4, 6], (0..24).map(|_| rng.random_range(-1.0..1.0f32)).collect()).unwrap();

        let (_, ctx) = group_norm_forward(&x, &gamma, &beta, 2, 1e-5).unwrap();
        let (dx, dgamma, dbeta) = group_norm_backward(&ctx, &gamma, &wsum).unwrap();

        let loss_x = |xt: &Tensor| -> crate::error::Result<f64> {
            let (y, _) = group_norm_forward(xt, &gamma, &beta, 2, 1e-5)?;
            Ok(y.data().iter().zip(wsum.data()).map(|(a, w)| (a * w) as f64).sum())
        };
        let rep = crate::ops::grad_check(loss_x, &x, &dx, 1e-2).unwrap();
        assert!(rep.max_rel_diff < 1e-3, "dx rel {}", rep.max_rel_diff);

        let loss_g = |gt: &Tensor| -> crate::error::Result<f64> {
            let (y, _) = group_norm_forward(&x, gt, &beta, 2, 1e-5)?;
            Ok(y.data().iter().zip(wsum.data()).map(|(a, w)| (a * w) as f64).sum())
        };
        let rep = crate::ops::grad_check(loss_g, &gamma, &dgamma, 1e-2).unwrap();
        assert!(rep.max_rel_diff < 1e-3, "dgamma rel {}", rep.max_rel_diff);

        let loss_b = |bt: &Tensor| -> crate::error::Result<f64> {
            let (y, _) = group_norm_forward(&x, &gamma, bt, 2, 1e-5)?;
            Ok(y.data().iter().zip(wsum.data()).map(|(a, w)| (a * w) as f64).sum())
        };
        let rep = crate::ops::grad_check(loss_b, &beta, &dbeta, 1e-2).unwrap();
        assert!(rep.max_rel_diff < 1e-3, "dbeta rel {}", rep.max_rel_diff);
    }
}

//! Spatial pooling: generalized-mean pooling over `[c, h, w]` maps and
//! global average pooling over all trailing axes.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Values are clamped to at least this before raising to the GeM power, so
/// fractional exponents stay real and the pole at zero is avoided.
const GEM_CLAMP: f32 = 1e-6;

/// Generalized-mean pooling: `v[c] = (mean_ij max(x[c,i,j], 1e-6)^p)^(1/p)`.
///
/// `p = 1` is average pooling; large `p` approaches max pooling.
pub fn gem_pool(x: &Tensor, p: f32) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "gem_pool expects rank 3, got {:?}",
            x.shape()
        )));
    }
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gem power must be finite and >= 1, got {}",
            p
        )));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (h * w) as f32;
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        let mut acc = 0.0f32;
        for &v in plane {
            acc += v.max(GEM_CLAMP).powf(p);
        }
        out.push((acc / n).powf(1.0 / p));
    }
    Tensor::new(&[c], out)
}

/// Averages a `[c, ...]` tensor over every axis after the first.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() < 2 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool expects rank >= 2, got {:?}",
            x.shape()
        )));
    }
    let c = x.shape()[0];
    let spatial: usize = x.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let plane = &x.data()[ch * spatial..(ch + 1) * spatial];
        let mut acc = 0.0f32;
        for &v in plane {
            acc += v;
        }
        out.push(acc / spatial as f32);
    }
    Tensor::new(&[c], out)
}

/// Backpropagates through [`global_avg_pool`]: spreads each channel gradient
/// uniformly over the pooled positions.
pub fn global_avg_pool_backward(input_shape: &[usize], dy: &Tensor) -> Result<Tensor> {
    let c = input_shape[0];
    if dy.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool_backward expects upstream [{}], got {:?}",
            c,
            dy.shape()
        )));
    }
    let spatial: usize = input_shape[1..].iter().product();
    let mut dx = Tensor::zeros(input_shape)?;
    for ch in 0..c {
        let g = dy.data()[ch] / spatial as f32;
        dx.data_mut()[ch * spatial..(ch + 1) * spatial].fill(g);
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gem_power_three_matches_reference() {
        // mean([1,8,27,64]) = 25; 25^(1/3) = 2.924017738212866.
        let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = gem_pool(&x, 3.0).unwrap();
        assert_relative_eq!(v.data()[0], 2.9240177, max_relative = 1e-6);
    }

    #[test]
    fn gem_power_one_is_average_pooling() {
        let x = Tensor::new(&[2, 1, 2], vec![1.0, 3.0, 0.5, 1.5]).unwrap();
        let v = gem_pool(&x, 1.0).unwrap();
        assert_relative_eq!(v.data()[0], 2.0, max_relative = 1e-6);
        assert_relative_eq!(v.data()[1], 1.0, max_relative = 1e-6);
    }

    #[test]
    fn gem_large_power_approaches_max() {
        let x = Tensor::new(&[1, 2, 2], vec![0.2, 0.9, 0.4, 0.1]).unwrap();
        let v = gem_pool(&x, 64.0).unwrap();
        assert!((v.data()[0] - 0.9).abs() < 0.03, "got {}", v.data()[0]);
    }

    #[test]
    fn gem_rejects_power_below_one() {
        let x = Tensor::zeros(&[1, 2, 2]).unwrap();
        assert!(gem_pool(&x, 0.5).is_err());
        assert!(gem_pool(&x, f32::NAN).is_err());
    }

    #[test]
    fn gap_means_all_trailing_axes() {
        let x = Tensor::new(&[2, 2, 1, 2], (0..8).map(|i| i as f32).collect()).unwrap();
        let v = global_avg_pool(&x).unwrap();
        assert_relative_eq!(v.data()[0], 1.5);
        assert_relative_eq!(v.data()[1], 5.5);
    }

    #[test]
    fn gap_backward_spreads_gradient_uniformly() {
        let dy = Tensor::new(&[2], vec![4.0, 8.0]).unwrap();
        let dx = global_avg_pool_backward(&[2, 2, 2], &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0]);
    }
}

//! Finite-difference verification of analytic gradients.
//!
//! Scalar objectives under test report their value in f64 so the central
//! difference `(f(x + e) - f(x - e)) / 2e` is not drowned by reduction
//! noise, even though the perturbed tensors themselves stay f32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to the denominator of the relative difference, so
/// near-zero gradients are compared absolutely at this scale instead of
/// blowing up the ratio. The value mirrors the usual single-precision
/// check (rtol 1e-2 together with atol 1e-4 at a 1e-3 step): coordinates
/// below the floor are judged by absolute deviation, since central
/// differences through an f32 forward pass carry rounding noise of order
/// `ulp(loss) / (2 eps)` regardless of how small the true gradient is.
pub const REL_FLOOR: f32 = 1e-2;

/// Coordinates probed per check (fewer if the tensor is smaller). Probes are
/// drawn without replacement from a fixed-seed stream, so a check is
/// reproducible run to run.
const PROBE_BUDGET: usize = 16;

/// Outcome of a finite-difference probe run.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    /// Largest `|fd - analytic|` over all probed coordinates.
    pub max_abs_diff: f32,
    /// Largest `|fd - analytic| / max(|fd|, |analytic|, REL_FLOOR)`.
    pub max_rel_diff: f32,
    /// Number of coordinates actually probed.
    pub probe_count: usize,
}

/// Compares `analytic` against central differences of `f` at up to
/// [`PROBE_BUDGET`] distinct coordinates of `x`.
///
/// `f` must be scalar-valued (reduce its output before returning) and is
/// called twice per probe. Fails with [`Error::NonFinite`] if `f` returns a
/// non-finite value at any probe point or if `analytic` itself contains
/// non-finite entries.
pub fn grad_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, eps: f32) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if analytic.shape() != x.shape() {
        return Err(Error::ShapeMismatch(format!(
            "grad_check input {:?} vs analytic {:?}",
            x.shape(),
            analytic.shape()
        )));
    }
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::InvalidArgument(format!(
            "grad_check eps must lie in [1e-4, 1e-2], got {}",
            eps
        )));
    }
    if !analytic.all_finite() {
        return Err(Error::NonFinite("analytic gradient contains non-finite values".into()));
    }

    // Partial Fisher-Yates: the first `m` slots end up holding a uniform
    // sample of distinct coordinates.
    let mut rng = ChaCha8Rng::seed_from_u64(0x6fd1);
    let n = x.len();
    let m = PROBE_BUDGET.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }

    let mut report = GradCheckReport {
        max_abs_diff: 0.0,
        max_rel_diff: 0.0,
        probe_count: m,
    };
    let mut probe = x.clone();
    for &coord in &idx[..m] {
        let orig = probe.data()[coord];
        // Divide by the realized f32 step, not the nominal 2*eps, so the
        // rounding of `orig +/- eps` does not masquerade as gradient error.
        let hp = orig + eps;
        let hm = orig - eps;
        probe.data_mut()[coord] = hp;
        let fp = f(&probe)?;
        probe.data_mut()[coord] = hm;
        let fm = f(&probe)?;
        probe.data_mut()[coord] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective returned a non-finite value near coordinate {}",
                coord
            )));
        }
        let fd = ((fp - fm) / (hp as f64 - hm as f64)) as f32;
        let an = analytic.data()[coord];
        let abs = (fd - an).abs();
        let rel = abs / fd.abs().max(an.abs()).max(REL_FLOOR);
        if abs > report.max_abs_diff {
            report.max_abs_diff = abs;
        }
        if rel > report.max_rel_diff {
            report.max_rel_diff = rel;
        }
    }
    Ok(report)
}

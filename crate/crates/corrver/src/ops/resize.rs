//! Bilinear resampling over one trailing axis pair of a dense tensor.
//!
//! Coordinates follow the half-pixel convention without corner alignment:
//! output index `o` samples source position `(o + 0.5) * (in / out) - 0.5`,
//! clamped into the valid range. Interpolation uses the difference form
//! `a + t * (b - a)`, which reproduces constants exactly and degrades to a
//! bitwise copy when the target size equals the source size.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Precomputed per-axis sample table: for each output index the lower source
/// index, the upper source index, and the blend weight of the upper sample.
#[derive(Debug, Clone)]
struct AxisTable {
    lo: Vec<usize>,
    hi: Vec<usize>,
    t: Vec<f32>,
}

fn axis_table(in_len: usize, out_len: usize) -> AxisTable {
    let scale = in_len as f32 / out_len as f32;
    let mut lo = Vec::with_capacity(out_len);
    let mut hi = Vec::with_capacity(out_len);
    let mut t = Vec::with_capacity(out_len);
    for o in 0..out_len {
        let src = ((o as f32 + 0.5) * scale - 0.5).max(0.0);
        let l = (src.floor() as usize).min(in_len - 1);
        let h = (l + 1).min(in_len - 1);
        lo.push(l);
        hi.push(h);
        t.push(src - l as f32);
    }
    AxisTable { lo, hi, t }
}

/// Sampling plan for resizing an `(h, w)` axis pair to `(out_h, out_w)`.
#[derive(Debug, Clone)]
pub struct ResizePlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ytab: AxisTable,
    xtab: AxisTable,
}

impl ResizePlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        if in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::DegenerateShape(format!(
                "resize {}x{} -> {}x{}",
                in_h, in_w, out_h, out_w
            )));
        }
        Ok(ResizePlan {
            in_h,
            in_w,
            out_h,
            out_w,
            ytab: axis_table(in_h, out_h),
            xtab: axis_table(in_w, out_w),
        })
    }

    pub fn out_h(&self) -> usize {
        self.out_h
    }

    pub fn out_w(&self) -> usize {
        self.out_w
    }
}

/// Resizes the `(h, w)` axis pair of a buffer laid out as
/// `[outer, h, w, inner]` (row-major). Returns `[outer, out_h, out_w, inner]`.
///
/// The interpolation is separable: rows first, then columns. Both passes use
/// the difference form of the lerp so constant inputs are preserved exactly.
pub fn resize_axes_forward(src: &[f32], outer: usize, inner: usize, plan: &ResizePlan) -> Vec<f32> {
    let (in_h, in_w, out_h, out_w) = (plan.in_h, plan.in_w, plan.out_h, plan.out_w);
    debug_assert_eq!(src.len(), outer * in_h * in_w * inner);
    let mut tmp = vec![0.0f32; out_h * in_w * inner];
    let mut dst = vec![0.0f32; outer * out_h * out_w * inner];
    for o in 0..outer {
        let s = &src[o * in_h * in_w * inner..(o + 1) * in_h * in_w * inner];
        // Vertical pass: blend source row pairs into `tmp`.
        for oy in 0..out_h {
            let (ylo, yhi, ty) = (plan.ytab.lo[oy], plan.ytab.hi[oy], plan.ytab.t[oy]);
            let row_lo = &s[ylo * in_w * inner..(ylo + 1) * in_w * inner];
            let row_hi = &s[yhi * in_w * inner..(yhi + 1) * in_w * inner];
            let row_out = &mut tmp[oy * in_w * inner..(oy + 1) * in_w * inner];
            for i in 0..in_w * inner {
                row_out[i] = row_lo[i] + ty * (row_hi[i] - row_lo[i]);
            }
        }
        // Horizontal pass: blend column pairs of `tmp` into the output.
        let d = &mut dst[o * out_h * out_w * inner..(o + 1) * out_h * out_w * inner];
        for oy in 0..out_h {
            let row = &tmp[oy * in_w * inner..(oy + 1) * in_w * inner];
            for ox in 0..out_w {
                let (xlo, xhi, tx) = (plan.xtab.lo[ox], plan.xtab.hi[ox], plan.xtab.t[ox]);
                let a = &row[xlo * inner..xlo * inner + inner];
                let b = &row[xhi * inner..xhi * inner + inner];
                let out = &mut d[(oy * out_w + ox) * inner..(oy * out_w + ox) * inner + inner];
                for i in 0..inner {
                    out[i] = a[i] + tx * (b[i] - a[i]);
                }
            }
        }
    }
    dst
}

/// Transpose of [`resize_axes_forward`]: scatters output-space gradients back
/// to source positions with the same blend weights.
pub fn resize_axes_backward(
    grad_out: &[f32],
    outer: usize,
    inner: usize,
    plan: &ResizePlan,
) -> Vec<f32> {
    let (in_h, in_w, out_h, out_w) = (plan.in_h, plan.in_w, plan.out_h, plan.out_w);
    debug_assert_eq!(grad_out.len(), outer * out_h * out_w * inner);
    let mut tmp = vec![0.0f32; out_h * in_w * inner];
    let mut dst = vec![0.0f32; outer * in_h * in_w * inner];
    for o in 0..outer {
        let g = &grad_out[o * out_h * out_w * inner..(o + 1) * out_h * out_w * inner];
        tmp.iter_mut().for_each(|v| *v = 0.0);
        // Horizontal transpose: accumulate into source columns.
        for oy in 0..out_h {
            let row = &mut tmp[oy * in_w * inner..(oy + 1) * in_w * inner];
            for ox in 0..out_w {
                let (xlo, xhi, tx) = (plan.xtab.lo[ox], plan.xtab.hi[ox], plan.xtab.t[ox]);
                let gi = &g[(oy * out_w + ox) * inner..(oy * out_w + ox) * inner + inner];
                for i in 0..inner {
                    row[xlo * inner + i] += (1.0 - tx) * gi[i];
                    row[xhi * inner + i] += tx * gi[i];
                }
            }
        }
        // Vertical transpose: accumulate into source rows.
        let d = &mut dst[o * in_h * in_w * inner..(o + 1) * in_h * in_w * inner];
        for oy in 0..out_h {
            let (ylo, yhi, ty) = (plan.ytab.lo[oy], plan.ytab.hi[oy], plan.ytab.t[oy]);
            let row = &tmp[oy * in_w * inner..(oy + 1) * in_w * inner];
            for i in 0..in_w * inner {
                d[ylo * in_w * inner + i] += (1.0 - ty) * row[i];
                d[yhi * in_w * inner + i] += ty * row[i];
            }
        }
    }
    dst
}

/// Bilinearly resizes a `[c, h, w]` tensor to `[c, out_h, out_w]`.
pub fn resize_bilinear(src: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if src.rank() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "resize_bilinear expects rank 3, got {:?}",
            src.shape()
        )));
    }
    let (c, h, w) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let plan = ResizePlan::new(h, w, out_h, out_w)?;
    let data = resize_axes_forward(src.data(), c, 1, &plan);
    Tensor::new(&[c, out_h, out_w], data)
}

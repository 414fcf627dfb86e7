//! Center-pivot 4D convolution over correlation volumes.
//!
//! A dense 4D kernel on `[hq, wq, hk, wk]` windows is sparsified to two 2D
//! slices through the kernel center: one convolves the query-side grid while
//! the key position is pinned at its pivot, the other convolves the key-side
//! grid with the query position pinned. Both slices reuse the verified 2D
//! convolution kernel; [`conv4d_naive`] keeps the dense semantics around as
//! the test oracle.

use crate::error::{Error, Result};
use crate::ops::{conv2d, conv2d_backward};
use crate::tensor::Tensor;

/// The two 2D slices (plus bias) of a sparsified 4D kernel. Both slices are
/// `[c_out, c_in, kh, kw]` with odd tap extents.
#[derive(Debug, Clone)]
pub struct CenterPivotKernel {
    pub query_side: Tensor,
    pub key_side: Tensor,
    pub bias: Tensor,
}

impl CenterPivotKernel {
    pub fn new(query_side: Tensor, key_side: Tensor, bias: Tensor) -> Result<Self> {
        let k = Self { query_side, key_side, bias };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_side.rank() != 4 || self.query_side.shape() != self.key_side.shape() {
            return Err(Error::ShapeMismatch(format!(
                "center-pivot slices must share a [c_out, c_in, kh, kw] shape, got {:?} and {:?}",
                self.query_side.shape(),
                self.key_side.shape()
            )));
        }
        let s = self.query_side.shape();
        if s[2] % 2 == 0 || s[3] % 2 == 0 || s[2] != s[3] {
            return Err(Error::InvalidArgument(format!(
                "center-pivot taps must be odd and square, got {}x{}",
                s[2], s[3]
            )));
        }
        if self.bias.shape() != [s[0]] {
            return Err(Error::ShapeMismatch(format!(
                "center-pivot bias {:?} does not match {} output channels",
                self.bias.shape(),
                s[0]
            )));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.query_side.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.query_side.shape()[1]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query_side: Tensor::zeros_like(&self.query_side),
            key_side: Tensor::zeros_like(&self.key_side),
            bias: Tensor::zeros_like(&self.bias),
        }
    }

    /// Embeds the two slices into a dense `[c_out, c_in, kh, kw, kh, kw]`
    /// kernel (the center tap receives both contributions).
    pub fn to_dense(&self) -> Result<Tensor> {
        let s = self.query_side.shape();
        let (co, ci, kh, kw) = (s[0], s[1], s[2], s[3]);
        let (ch, cw) = (kh / 2, kw / 2);
        let mut dense = Tensor::zeros(&[co, ci, kh, kw, kh, kw])?;
        for o in 0..co {
            for i in 0..ci {
                for u in 0..kh {
                    for v in 0..kw {
                        let q = self.query_side.at(&[o, i, u, v]);
                        let k = self.key_side.at(&[o, i, u, v]);
                        let cur = dense.at(&[o, i, u, v, ch, cw]);
                        dense.set(&[o, i, u, v, ch, cw], cur + q);
                        let cur = dense.at(&[o, i, ch, cw, u, v]);
                        dense.set(&[o, i, ch, cw, u, v], cur + k);
                    }
                }
            }
        }
        Ok(dense)
    }
}

fn check_input(x: &Tensor, k: &CenterPivotKernel) -> Result<()> {
    if x.rank() != 5 {
        return Err(Error::ShapeMismatch(format!(
            "conv4d expects [c, hq, wq, hk, wk], got {:?}",
            x.shape()
        )));
    }
    if x.shape()[0] != k.in_channels() {
        return Err(Error::ChannelMismatch {
            expected: k.in_channels(),
            got: x.shape()[0],
        });
    }
    Ok(())
}

fn strided_out(extent: usize, tap: usize, stride: usize) -> usize {
    (extent + (tap - 1) - tap) / stride + 1
}

/// Gathers the query-side 2D image at a fixed key position.
fn gather_query_image(x: &Tensor, a: usize, b: usize) -> Tensor {
    let (ci, hq, wq, hk, wk) =
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let xd = x.data();
    let mut img = vec![0.0f32; ci * hq * wq];
    for c in 0..ci {
        for i in 0..hq {
            for j in 0..wq {
                img[(c * hq + i) * wq + j] = xd[(((c * hq + i) * wq + j) * hk + a) * wk + b];
            }
        }
    }
    Tensor::new(&[ci, hq, wq], img).expect("gather shape is valid")
}

/// Gathers the key-side 2D image at a fixed query position (contiguous rows).
fn gather_key_image(x: &Tensor, i: usize, j: usize) -> Tensor {
    let (ci, hq, wq, hk, wk) =
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let xd = x.data();
    let mut img = vec![0.0f32; ci * hk * wk];
    for c in 0..ci {
        let src = ((c * hq + i) * wq + j) * hk * wk;
        img[c * hk * wk..(c + 1) * hk * wk].copy_from_slice(&xd[src..src + hk * wk]);
    }
    Tensor::new(&[ci, hk, wk], img).expect("gather shape is valid")
}

/// 4D convolution with a center-pivot kernel. Padding is fixed at half the
/// tap extent on all four spatial axes; each image side downsamples by its
/// own stride.
pub fn conv4d_center_pivot(
    x: &Tensor,
    k: &CenterPivotKernel,
    stride_q: usize,
    stride_k: usize,
) -> Result<Tensor> {
    check_input(x, k)?;
    let (hq, wq, hk, wk) = (x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let s = k.query_side.shape();
    let (co, kh, kw) = (s[0], s[2], s[3]);
    let pad = kh / 2;
    let (oqh, oqw) = (strided_out(hq, kh, stride_q), strided_out(wq, kw, stride_q));
    let (okh, okw) = (strided_out(hk, kh, stride_k), strided_out(wk, kw, stride_k));

    let mut out = vec![0.0f32; co * oqh * oqw * okh * okw];
    // Query-side slice: convolve over (hq, wq) with the key pinned at its
    // strided pivot.
    for ik in 0..okh {
        for jk in 0..okw {
            let img = gather_query_image(x, ik * stride_k, jk * stride_k);
            let y = conv2d(&img, &k.query_side, None, stride_q, pad)?;
            let yd = y.data();
            for c in 0..co {
                for i in 0..oqh {
                    for j in 0..oqw {
                        out[(((c * oqh + i) * oqw + j) * okh + ik) * okw + jk] +=
                            yd[(c * oqh + i) * oqw + j];
                    }
                }
            }
        }
    }
    // Key-side slice: convolve over (hk, wk) with the query pinned.
    for iq in 0..oqh {
        for jq in 0..oqw {
            let img = gather_key_image(x, iq * stride_q, jq * stride_q);
            let y = conv2d(&img, &k.key_side, None, stride_k, pad)?;
            let yd = y.data();
            for c in 0..co {
                let dst = ((c * oqh + iq) * oqw + jq) * okh * okw;
                for p in 0..okh * okw {
                    out[dst + p] += yd[c * okh * okw + p];
                }
            }
        }
    }
    for c in 0..co {
        let b = k.bias.data()[c];
        for v in &mut out[c * oqh * oqw * okh * okw..(c + 1) * oqh * oqw * okh * okw] {
            *v += b;
        }
    }
    Tensor::new(&[co, oqh, oqw, okh, okw], out)
}

/// Gradients of [`conv4d_center_pivot`]: input gradient plus kernel-shaped
/// parameter gradients.
pub fn conv4d_center_pivot_backward(
    x: &Tensor,
    k: &CenterPivotKernel,
    dy: &Tensor,
    stride_q: usize,
    stride_k: usize,
) -> Result<(Tensor, CenterPivotKernel)> {
    check_input(x, k)?;
    let (ci, hq, wq, hk, wk) =
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let s = k.query_side.shape();
    let (co, kh, kw) = (s[0], s[2], s[3]);
    let pad = kh / 2;
    let (oqh, oqw) = (strided_out(hq, kh, stride_q), strided_out(wq, kw, stride_q));
    let (okh, okw) = (strided_out(hk, kh, stride_k), strided_out(wk, kw, stride_k));
    if dy.shape() != [co, oqh, oqw, okh, okw] {
        return Err(Error::ShapeMismatch(format!(
            "conv4d backward expects upstream [{}, {}, {}, {}, {}], got {:?}",
            co,
            oqh,
            oqw,
            okh,
            okw,
            dy.shape()
        )));
    }

    let mut grads = k.zeros_like();
    let mut dx = Tensor::zeros(x.shape())?;
    let gd = dy.data();
    for c in 0..co {
        let mut acc = 0.0f32;
        for &g in &gd[c * oqh * oqw * okh * okw..(c + 1) * oqh * oqw * okh * okw] {
            acc += g;
        }
        grads.bias.data_mut()[c] = acc;
    }
    // Query-side slice.
    for ik in 0..okh {
        for jk in 0..okw {
            let img = gather_query_image(x, ik * stride_k, jk * stride_k);
            let mut dyq = vec![0.0f32; co * oqh * oqw];
            for c in 0..co {
                for i in 0..oqh {
                    for j in 0..oqw {
                        dyq[(c * oqh + i) * oqw + j] =
                            gd[(((c * oqh + i) * oqw + j) * okh + ik) * okw + jk];
                    }
                }
            }
            let dyq = Tensor::new(&[co, oqh, oqw], dyq)?;
            let g = conv2d_backward(&img, &k.query_side, &dyq, stride_q, pad)?;
            grads.query_side.add_scaled(&g.dk, 1.0)?;
            let (a, b) = (ik * stride_k, jk * stride_k);
            let dxd = dx.data_mut();
            for c in 0..ci {
                for i in 0..hq {
                    for j in 0..wq {
                        dxd[(((c * hq + i) * wq + j) * hk + a) * wk + b] +=
                            g.dx.data()[(c * hq + i) * wq + j];
                    }
                }
            }
        }
    }
    // Key-side slice.
    for iq in 0..oqh {
        for jq in 0..oqw {
            let img = gather_key_image(x, iq * stride_q, jq * stride_q);
            let mut dyk = vec![0.0f32; co * okh * okw];
            for c in 0..co {
                let src = ((c * oqh + iq) * oqw + jq) * okh * okw;
                dyk[c * okh * okw..(c + 1) * okh * okw].copy_from_slice(&gd[src..src + okh * okw]);
            }
            let dyk = Tensor::new(&[co, okh, okw], dyk)?;
            let g = conv2d_backward(&img, &k.key_side, &dyk, stride_k, pad)?;
            grads.key_side.add_scaled(&g.dk, 1.0)?;
            let (a, b) = (iq * stride_q, jq * stride_q);
            let dxd = dx.data_mut();
            for c in 0..ci {
                let dst = ((c * hq + a) * wq + b) * hk * wk;
                for p in 0..hk * wk {
                    dxd[dst + p] += g.dx.data()[c * hk * wk + p];
                }
            }
        }
    }
    Ok((dx, grads))
}

/// Dense 4D convolution by direct summation; test-scale oracle only.
pub fn conv4d_naive(
    x: &Tensor,
    full_kernel: &Tensor,
    stride_q: usize,
    stride_k: usize,
) -> Result<Tensor> {
    if x.rank() != 5 || full_kernel.rank() != 6 {
        return Err(Error::ShapeMismatch(format!(
            "conv4d_naive expects rank-5 input and rank-6 kernel, got {:?} and {:?}",
            x.shape(),
            full_kernel.shape()
        )));
    }
    let (ci, hq, wq, hk, wk) =
        (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
    let ks = full_kernel.shape();
    let (co, kh, kw) = (ks[0], ks[2], ks[3]);
    if ks[1] != ci {
        return Err(Error::ChannelMismatch { expected: ks[1], got: ci });
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let (oqh, oqw) = (strided_out(hq, kh, stride_q), strided_out(wq, kw, stride_q));
    let (okh, okw) = (strided_out(hk, kh, stride_k), strided_out(wk, kw, stride_k));
    let mut out = Tensor::zeros(&[co, oqh, oqw, okh, okw])?;
    for c in 0..co {
        for iq in 0..oqh {
            for jq in 0..oqw {
                for ik in 0..okh {
                    for jk in 0..okw {
                        let mut acc = 0.0f32;
                        for i in 0..ci {
                            for uq in 0..kh {
                                for vq in 0..kw {
                                    let yq = (iq * stride_q + uq) as isize - ph as isize;
                                    let xq = (jq * stride_q + vq) as isize - pw as isize;
                                    if yq < 0 || xq < 0 || yq >= hq as isize || xq >= wq as isize {
                                        continue;
                                    }
                                    for uk in 0..kh {
                                        for vk in 0..kw {
                                            let yk = (ik * stride_k + uk) as isize - ph as isize;
                                            let xk = (jk * stride_k + vk) as isize - pw as isize;
                                            if yk < 0
                                                || xk < 0
                                                || yk >= hk as isize
                                                || xk >= wk as isize
                                            {
                                                continue;
                                            }
                                            acc += full_kernel.at(&[c, i, uq, vq, uk, vk])
                                                * x.at(&[
                                                    i,
                                                    yq as usize,
                                                    xq as usize,
                                                    yk as usize,
                                                    xk as usize,
                                                ]);
                                        }
                                    }
                                }
                            }
                        }
                        out.set(&[c, iq, jq, ik, jk], acc);
                    }
                }
            }
        }
    }
    Ok(out)
}

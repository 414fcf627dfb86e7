//! Direct 2D convolution with symmetric zero padding.
//!
//! Layouts: input `[c_in, h, w]`, kernel `[c_out, c_in, kh, kw]`, bias
//! `[c_out]`. Kernel extents must be odd and the stride must be 1 or 2.
//! The accumulation order is fixed (output channel, input channel, tap row,
//! tap column), so results are reproducible bit for bit.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_args(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<()> {
    if x.rank() != 3 || k.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d expects input [c,h,w] and kernel [co,ci,kh,kw], got {:?} and {:?}",
            x.shape(),
            k.shape()
        )));
    }
    if k.shape()[1] != x.shape()[0] {
        return Err(Error::ChannelMismatch {
            expected: k.shape()[1],
            got: x.shape()[0],
        });
    }
    if k.shape()[2] % 2 == 0 || k.shape()[3] % 2 == 0 {
        return Err(Error::InvalidArgument(format!(
            "conv2d kernel extents must be odd, got {}x{}",
            k.shape()[2],
            k.shape()[3]
        )));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::InvalidArgument(format!(
            "conv2d stride must be 1 or 2, got {}",
            stride
        )));
    }
    if let Some(b) = bias {
        if b.shape() != [k.shape()[0]] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias shape {:?} does not match {} output channels",
                b.shape(),
                k.shape()[0]
            )));
        }
    }
    Ok(())
}

fn out_extent(input: usize, tap: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < tap {
        return Err(Error::DegenerateShape(format!(
            "conv2d input extent {} with pad {} is smaller than tap {}",
            input, pad, tap
        )));
    }
    Ok((padded - tap) / stride + 1)
}

/// Convolves `x` with `k`, adding `bias` per output channel when given.
pub fn conv2d(
    x: &Tensor,
    k: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    check_args(x, k, bias, stride)?;
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = out_extent(h, kh, pad, stride)?;
    let ow = out_extent(w, kw, pad, stride)?;

    let mut y = vec![0.0f32; co_n * oh * ow];
    if let Some(b) = bias {
        for co in 0..co_n {
            y[co * oh * ow..(co + 1) * oh * ow].fill(b.data()[co]);
        }
    }
    let xd = x.data();
    let kd = k.data();
    for co in 0..co_n {
        for ci in 0..ci_n {
            for u in 0..kh {
                for v in 0..kw {
                    let kv = kd[((co * ci_n + ci) * kh + u) * kw + v];
                    if kv == 0.0 {
                        continue;
                    }
                    for i in 0..oh {
                        let iy = (i * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * w;
                        let yrow = (co * oh + i) * ow;
                        for j in 0..ow {
                            let ix = (j * stride + v) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            y[yrow + j] += kv * xd[xrow + ix as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[co_n, oh, ow], y)
}

/// Gradients of a [`conv2d`] call with respect to its inputs.
#[derive(Debug, Clone)]
pub struct Conv2dGrads {
    pub dx: Tensor,
    pub dk: Tensor,
    pub db: Tensor,
}

/// Backpropagates `dy` through `conv2d(x, k, bias, stride, pad)`.
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Conv2dGrads> {
    check_args(x, k, None, stride)?;
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = out_extent(h, kh, pad, stride)?;
    let ow = out_extent(w, kw, pad, stride)?;
    if dy.shape() != [co_n, oh, ow] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d_backward expects upstream shape [{}, {}, {}], got {:?}",
            co_n,
            oh,
            ow,
            dy.shape()
        )));
    }

    let mut dx = vec![0.0f32; ci_n * h * w];
    let mut dk = vec![0.0f32; co_n * ci_n * kh * kw];
    let mut db = vec![0.0f32; co_n];
    let xd = x.data();
    let kd = k.data();
    let gd = dy.data();
    for co in 0..co_n {
        for i in 0..oh {
            for j in 0..ow {
                db[co] += gd[(co * oh + i) * ow + j];
            }
        }
    }
    for co in 0..co_n {
        for ci in 0..ci_n {
            for u in 0..kh {
                for v in 0..kw {
                    let kidx = ((co * ci_n + ci) * kh + u) * kw + v;
                    let kv = kd[kidx];
                    let mut ksum = 0.0f32;
                    for i in 0..oh {
                        let iy = (i * stride + u) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = (ci * h + iy as usize) * w;
                        let yrow = (co * oh + i) * ow;
                        for j in 0..ow {
                            let ix = (j * stride + v) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let g = gd[yrow + j];
                            ksum += g * xd[xrow + ix as usize];
                            dx[xrow + ix as usize] += g * kv;
                        }
                    }
                    dk[kidx] += ksum;
                }
            }
        }
    }
    Ok(Conv2dGrads {
        dx: Tensor::new(&[ci_n, h, w], dx)?,
        dk: Tensor::new(&[co_n, ci_n, kh, kw], dk)?,
        db: Tensor::new(&[co_n], db)?,
    })
}

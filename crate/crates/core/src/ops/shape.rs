//! Layout operations: transposition, padding and residual down-sampling.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Swaps the last two axes.
pub fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.rank();
    if r < 2 {
        return Err(shape_err("transpose_last2", "rank", format!("need rank >= 2, got {:?}", x.shape())));
    }
    let (m, n) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (m * n);
    let xd = x.data();
    let mut y = vec![T::zero(); x.len()];
    for b in 0..batch {
        let off = b * m * n;
        for i in 0..m {
            for j in 0..n {
                y[off + j * m + i] = xd[off + i * n + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(&shape, y)
}

/// Zero-pads the last axis on the right up to `len`.
pub fn pad_last<T: Scalar>(x: &Tensor<T>, len: usize) -> Result<Tensor<T>> {
    let last = *x.shape().last().ok_or_else(|| shape_err("pad_last", "rank", "empty shape"))?;
    if len < last {
        return Err(shape_err("pad_last", "last axis", format!("cannot pad {last} down to {len}")));
    }
    let rows = x.len() / last;
    let mut y = vec![T::zero(); rows * len];
    for r in 0..rows {
        y[r * len..r * len + last].copy_from_slice(&x.data()[r * last..(r + 1) * last]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = len;
    Tensor::new(&shape, y)
}

pub fn pad_last_vjp<T: Scalar>(x_shape: &[usize], gy: &Tensor<T>) -> Result<Tensor<T>> {
    let last = *x_shape.last().unwrap();
    let len = *gy.shape().last().unwrap();
    let rows = gy.len() / len;
    let mut g = Vec::with_capacity(rows * last);
    for r in 0..rows {
        g.extend_from_slice(&gy.data()[r * len..r * len + last]);
    }
    Tensor::new(x_shape, g)
}

/// Parameter-free residual shortcut for `[b,c,h,w]`: keeps every `stride`-th
/// spatial position and zero-pads channels to `out_channels`, splitting the
/// padding evenly on both sides.
pub fn subsample_pad<T: Scalar>(x: &Tensor<T>, stride: usize, out_channels: usize) -> Result<Tensor<T>> {
    let (b, c, h, w, ho, wo, lo) = subsample_geom(x.shape(), stride, out_channels)?;
    let xd = x.data();
    let mut y = vec![T::zero(); b * out_channels * ho * wo];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    y[((n * out_channels + ch + lo) * ho + i) * wo + j] = xd[((n * c + ch) * h + i * stride) * w + j * stride];
                }
            }
        }
    }
    Tensor::new(&[b, out_channels, ho, wo], y)
}

pub fn subsample_pad_vjp<T: Scalar>(x_shape: &[usize], stride: usize, out_channels: usize, gy: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w, ho, wo, lo) = subsample_geom(x_shape, stride, out_channels)?;
    gy.expect_shape("subsample_pad_vjp", &[b, out_channels, ho, wo])?;
    let gd = gy.data();
    let mut g = vec![T::zero(); b * c * h * w];
    for n in 0..b {
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    g[((n * c + ch) * h + i * stride) * w + j * stride] = gd[((n * out_channels + ch + lo) * ho + i) * wo + j];
                }
            }
        }
    }
    Tensor::new(x_shape, g)
}

type SubsampleGeom = (usize, usize, usize, usize, usize, usize, usize);

fn subsample_geom(shape: &[usize], stride: usize, out_channels: usize) -> Result<SubsampleGeom> {
    if shape.len() != 4 {
        return Err(shape_err("subsample_pad", "rank", format!("need [b,c,h,w], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if out_channels < c || stride == 0 {
        return Err(shape_err("subsample_pad", "axis 1", format!("cannot map {c} channels to {out_channels}")));
    }
    Ok((b, c, h, w, h.div_ceil(stride), w.div_ceil(stride), (out_channels - c) / 2))
}

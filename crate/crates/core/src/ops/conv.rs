//! Zero-padded grouped cross-correlation over one or two spatial axes.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: &[usize], padding: &[usize], groups: usize) -> Self {
        Self {
            stride: stride.to_vec(),
            padding: padding.to_vec(),
            groups,
        }
    }

    /// Stride 1, no padding, one group, for `rank` spatial axes.
    pub fn unit(rank: usize) -> Self {
        Self::new(&vec![1; rank], &vec![0; rank], 1)
    }
}

/// `floor((input + 2*pad - k) / stride) + 1`, or `None` when the kernel does
/// not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Geometry normalised to two spatial axes (rank-1 problems get `h = 1`).
#[derive(Clone, Copy, Debug)]
struct Geom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    cg: usize,
    og: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

fn geometry<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<(Geom, Vec<usize>)> {
    const OP: &str = "conv_nd";
    let rank = x.rank();
    if rank != 3 && rank != 4 {
        return Err(shape_err(OP, "rank", format!("input must be [b,c,*spatial] with 1 or 2 spatial axes, got {:?}", x.shape())));
    }
    let sr = rank - 2;
    if w.rank() != rank {
        return Err(shape_err(OP, "kernel rank", format!("kernel {:?} does not match input {:?}", w.shape(), x.shape())));
    }
    if spec.stride.len() != sr || spec.padding.len() != sr {
        return Err(arg_err(OP, format!("stride/padding need {sr} entries, got {:?}/{:?}", spec.stride, spec.padding)));
    }
    if spec.stride.contains(&0) {
        return Err(arg_err(OP, "stride must be positive"));
    }
    let groups = spec.groups;
    let (b, c) = (x.shape()[0], x.shape()[1]);
    let (o, cg) = (w.shape()[0], w.shape()[1]);
    if groups == 0 || c % groups != 0 {
        return Err(shape_err(OP, "axis 1 (input channels)", format!("{c} channels not divisible by {groups} groups")));
    }
    if o % groups != 0 {
        return Err(shape_err(OP, "axis 0 (output channels)", format!("{o} kernels not divisible by {groups} groups")));
    }
    if cg != c / groups {
        return Err(shape_err(OP, "kernel axis 1", format!("expected {} input channels per group, kernel has {cg}", c / groups)));
    }
    let mut out_spatial = Vec::with_capacity(sr);
    for a in 0..sr {
        let e = conv_out_extent(x.shape()[2 + a], w.shape()[2 + a], spec.stride[a], spec.padding[a])
            .ok_or_else(|| {
                shape_err(
                    OP,
                    format!("spatial axis {a}"),
                    format!("kernel {} larger than padded input {}", w.shape()[2 + a], x.shape()[2 + a] + 2 * spec.padding[a]),
                )
            })?;
        out_spatial.push(e);
    }
    let g = if sr == 1 {
        Geom {
            b, c, h: 1, w: x.shape()[2], o, cg, og: o / groups,
            kh: 1, kw: w.shape()[2], sh: 1, sw: spec.stride[0], ph: 0, pw: spec.padding[0],
            ho: 1, wo: out_spatial[0],
        }
    } else {
        Geom {
            b, c, h: x.shape()[2], w: x.shape()[3], o, cg, og: o / groups,
            kh: w.shape()[2], kw: w.shape()[3], sh: spec.stride[0], sw: spec.stride[1],
            ph: spec.padding[0], pw: spec.padding[1], ho: out_spatial[0], wo: out_spatial[1],
        }
    };
    let mut out_shape = vec![b, o];
    out_shape.extend(out_spatial);
    Ok((g, out_shape))
}

/// Valid output-column range `[lo, hi)` for kernel offset `k` so that the
/// input column `ox*stride + k - pad` lies in `[0, w)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize) {
    // ox*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // ox*stride + k - pad <= w - 1
    let hi = if k >= w + pad { 0 } else { ((w + pad - 1 - k) / stride + 1).min(wo) };
    (lo.min(hi), hi)
}

/// Cross-correlation `y[n,o,..] = sum_{c,k} w[o,c,k] * x[n, g*cg + c, s*i + k - p]`.
pub fn conv_nd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let (g, out_shape) = geometry(x, w, spec)?;
    let mut y = vec![T::zero(); g.b * g.o * g.ho * g.wo];
    let (xd, wd) = (x.data(), w.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    for n in 0..g.b {
        for oc in 0..g.o {
            let grp = oc / g.og;
            let out = &mut y[(n * g.o + oc) * plane_out..(n * g.o + oc + 1) * plane_out];
            for icl in 0..g.cg {
                let ic = grp * g.cg + icl;
                let xin = &xd[(n * g.c + ic) * plane_in..(n * g.c + ic + 1) * plane_in];
                let wk = &wd[(oc * g.cg + icl) * g.kh * g.kw..(oc * g.cg + icl + 1) * g.kh * g.kw];
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ki, g.ph, g.sh, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = wk[ki * g.kw + kj];
                        let (ox_lo, ox_hi) = valid_range(kj, g.pw, g.sw, g.w, g.wo);
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.sh + ki - g.ph;
                            let row_in = &xin[iy * g.w..(iy + 1) * g.w];
                            let row_out = &mut out[oy * g.wo..(oy + 1) * g.wo];
                            if g.sw == 1 {
                                let base = kj as isize - g.pw as isize;
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[(ox as isize + base) as usize];
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    row_out[ox] += wv * row_in[ox * g.sw + kj - g.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&out_shape, y)
}

/// Vector-Jacobian product of [`conv_nd`]: returns `(dx, dw)`.
pub fn conv_nd_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    spec: &ConvSpec,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (g, out_shape) = geometry(x, w, spec)?;
    gy.expect_shape("conv_nd_vjp", &out_shape)?;
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); w.len()];
    let (xd, wd, gd) = (x.data(), w.data(), gy.data());
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let ksz = g.kh * g.kw;
    for n in 0..g.b {
        for oc in 0..g.o {
            let grp = oc / g.og;
            let go = &gd[(n * g.o + oc) * plane_out..(n * g.o + oc + 1) * plane_out];
            for icl in 0..g.cg {
                let ic = grp * g.cg + icl;
                let in_off = (n * g.c + ic) * plane_in;
                let w_off = (oc * g.cg + icl) * ksz;
                for ki in 0..g.kh {
                    let (oy_lo, oy_hi) = valid_range(ki, g.ph, g.sh, g.h, g.ho);
                    for kj in 0..g.kw {
                        let wv = wd[w_off + ki * g.kw + kj];
                        let (ox_lo, ox_hi) = valid_range(kj, g.pw, g.sw, g.w, g.wo);
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.sh + ki - g.ph;
                            let row = in_off + iy * g.w;
                            for ox in ox_lo..ox_hi {
                                let ix = ox * g.sw + kj - g.pw;
                                let gv = go[oy * g.wo + ox];
                                acc += gv * xd[row + ix];
                                gx[row + ix] += wv * gv;
                            }
                        }
                        gw[w_off + ki * g.kw + kj] += acc;
                    }
                }
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(w.shape(), gw)?))
}

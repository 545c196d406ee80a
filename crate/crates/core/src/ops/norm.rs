//! Affine normalization: per-channel batch statistics (vision) or per-row
//! statistics over the trailing axis (sequence).

use crate::error::{arg_err, shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormAxes {
    /// Batch normalization: statistics over every axis except `axis`; the
    /// affine parameters are indexed by `axis`.
    Channel(usize),
    /// Layer normalization: statistics per row over the last axis; the affine
    /// parameters are indexed by the last axis.
    Trailing,
}

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    /// Mean 0, variance 1.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Values kept from the forward pass for the backward pass.
#[derive(Clone, Debug)]
pub struct NormCache<T> {
    pub xhat: Tensor<T>,
    /// One entry per statistics group (channel or row).
    pub inv_std: Vec<T>,
    pub batch_stats: bool,
}

#[derive(Clone, Copy)]
struct Layout {
    outer: usize,
    groups: usize,
    inner: usize,
}

impl Layout {
    fn of(shape: &[usize], axes: NormAxes) -> Result<Self> {
        match axes {
            NormAxes::Channel(a) => {
                if a >= shape.len() {
                    return Err(shape_err("affine_norm", format!("axis {a}"), format!("shape {shape:?} has no such axis")));
                }
                Ok(Self {
                    outer: shape[..a].iter().product(),
                    groups: shape[a],
                    inner: shape[a + 1..].iter().product(),
                })
            }
            NormAxes::Trailing => {
                let last = *shape.last().ok_or_else(|| shape_err("affine_norm", "rank", "empty shape"))?;
                Ok(Self {
                    outer: 1,
                    groups: shape.iter().product::<usize>() / last,
                    inner: last,
                })
            }
        }
    }
}

fn param_extent(shape: &[usize], axes: NormAxes) -> usize {
    match axes {
        NormAxes::Channel(a) => shape[a],
        NormAxes::Trailing => *shape.last().unwrap(),
    }
}

/// `(x - mean) / sqrt(var + eps) * gamma + beta`.
///
/// Batch normalization in train mode uses biased batch statistics and, when
/// `running` is given, folds the batch mean and unbiased variance into it with
/// momentum [`DEFAULT_MOMENTUM`]. Eval mode reads the running statistics.
/// Layer normalization ignores `mode`.
pub fn affine_norm<T: Scalar>(
    x: &Tensor<T>,
    axes: NormAxes,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: Mode,
    running: Option<&mut RunningStats<T>>,
    eps: T,
) -> Result<(Tensor<T>, NormCache<T>)> {
    const OP: &str = "affine_norm";
    if eps <= T::zero() {
        return Err(arg_err(OP, "eps must be positive"));
    }
    let lay = Layout::of(x.shape(), axes)?;
    let pe = param_extent(x.shape(), axes);
    gamma.expect_shape("affine_norm (gamma)", &[pe])?;
    beta.expect_shape("affine_norm (beta)", &[pe])?;
    let xd = x.data();
    let (g, b) = (gamma.data(), beta.data());
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    match axes {
        NormAxes::Channel(_) => {
            let count = lay.outer * lay.inner;
            let (mean, var, batch) = match mode {
                Mode::Train => {
                    let (m, v) = channel_stats(xd, lay);
                    if let Some(rs) = running {
                        if rs.mean.len() != lay.groups || rs.var.len() != lay.groups {
                            return Err(shape_err(OP, "running stats", format!("expected {} channels", lay.groups)));
                        }
                        let mom = T::lit(DEFAULT_MOMENTUM);
                        let corr = if count > 1 {
                            T::from_usize_lossy(count) / T::from_usize_lossy(count - 1)
                        } else {
                            T::one()
                        };
                        for ch in 0..lay.groups {
                            rs.mean[ch] = (T::one() - mom) * rs.mean[ch] + mom * m[ch];
                            rs.var[ch] = (T::one() - mom) * rs.var[ch] + mom * v[ch] * corr;
                        }
                    }
                    (m, v, true)
                }
                Mode::Eval => {
                    let rs = running.ok_or_else(|| Error::InvalidArgument {
                        op: OP,
                        detail: "eval mode requires initialized running statistics".into(),
                    })?;
                    if rs.mean.len() != lay.groups {
                        return Err(shape_err(OP, "running stats", format!("expected {} channels", lay.groups)));
                    }
                    (rs.mean.clone(), rs.var.clone(), false)
                }
            };
            let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            for o in 0..lay.outer {
                for ch in 0..lay.groups {
                    let base = (o * lay.groups + ch) * lay.inner;
                    for i in base..base + lay.inner {
                        let h = (xd[i] - mean[ch]) * inv[ch];
                        xhat[i] = h;
                        y[i] = h * g[ch] + b[ch];
                    }
                }
            }
            Ok((
                Tensor::new(x.shape(), y)?,
                NormCache {
                    xhat: Tensor::new(x.shape(), xhat)?,
                    inv_std: inv,
                    batch_stats: batch,
                },
            ))
        }
        NormAxes::Trailing => {
            let n = T::from_usize_lossy(lay.inner);
            let mut inv = Vec::with_capacity(lay.groups);
            for r in 0..lay.groups {
                let row = &xd[r * lay.inner..(r + 1) * lay.inner];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv.push(is);
                for (k, &v) in row.iter().enumerate() {
                    let h = (v - mean) * is;
                    xhat[r * lay.inner + k] = h;
                    y[r * lay.inner + k] = h * g[k] + b[k];
                }
            }
            Ok((
                Tensor::new(x.shape(), y)?,
                NormCache {
                    xhat: Tensor::new(x.shape(), xhat)?,
                    inv_std: inv,
                    batch_stats: true,
                },
            ))
        }
    }
}

/// Two-pass per-channel mean and biased variance.
fn channel_stats<T: Scalar>(xd: &[T], lay: Layout) -> (Vec<T>, Vec<T>) {
    let n = T::from_usize_lossy(lay.outer * lay.inner);
    let mut mean = vec![T::zero(); lay.groups];
    let mut var = vec![T::zero(); lay.groups];
    for o in 0..lay.outer {
        for ch in 0..lay.groups {
            let base = (o * lay.groups + ch) * lay.inner;
            mean[ch] += xd[base..base + lay.inner].iter().copied().sum::<T>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for o in 0..lay.outer {
        for ch in 0..lay.groups {
            let base = (o * lay.groups + ch) * lay.inner;
            var[ch] += xd[base..base + lay.inner].iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn affine_norm_vjp<T: Scalar>(
    cache: &NormCache<T>,
    axes: NormAxes,
    gamma: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    gy.expect_shape("affine_norm_vjp", cache.xhat.shape())?;
    let lay = Layout::of(gy.shape(), axes)?;
    let (xh, gd, g) = (cache.xhat.data(), gy.data(), gamma.data());
    let pe = gamma.len();
    let mut ggamma = vec![T::zero(); pe];
    let mut gbeta = vec![T::zero(); pe];
    let mut gx = vec![T::zero(); gy.len()];
    match axes {
        NormAxes::Channel(_) => {
            for o in 0..lay.outer {
                for ch in 0..lay.groups {
                    let base = (o * lay.groups + ch) * lay.inner;
                    for i in base..base + lay.inner {
                        ggamma[ch] += gd[i] * xh[i];
                        gbeta[ch] += gd[i];
                    }
                }
            }
            let n = T::from_usize_lossy(lay.outer * lay.inner);
            for o in 0..lay.outer {
                for ch in 0..lay.groups {
                    let base = (o * lay.groups + ch) * lay.inner;
                    let scale = g[ch] * cache.inv_std[ch];
                    for i in base..base + lay.inner {
                        gx[i] = if cache.batch_stats {
                            scale * (gd[i] - gbeta[ch] / n - xh[i] * ggamma[ch] / n)
                        } else {
                            scale * gd[i]
                        };
                    }
                }
            }
        }
        NormAxes::Trailing => {
            let n = T::from_usize_lossy(lay.inner);
            for r in 0..lay.groups {
                let base = r * lay.inner;
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for k in 0..lay.inner {
                    let i = base + k;
                    ggamma[k] += gd[i] * xh[i];
                    gbeta[k] += gd[i];
                    let gh = gd[i] * g[k];
                    s1 += gh;
                    s2 += gh * xh[i];
                }
                for k in 0..lay.inner {
                    let i = base + k;
                    let gh = gd[i] * g[k];
                    gx[i] = cache.inv_std[r] * (gh - s1 / n - xh[i] * s2 / n);
                }
            }
        }
    }
    Ok((
        Tensor::new(gy.shape(), gx)?,
        Tensor::new(gamma.shape(), ggamma)?,
        Tensor::new(gamma.shape(), gbeta)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn x() -> Tensor<f64> {
        Tensor::from_fn(&[3, 2, 4], |i| ((i * 7919) % 13) as f64 * 0.3 - 1.0)
    }

    #[test]
    fn zero_affine_gives_zeros() {
        let z = Tensor::zeros(&[2]);
        let (y, _) = affine_norm(&x(), NormAxes::Channel(1), &z, &z, Mode::Train, None, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_standardizes_to_zero() {
        let c = Tensor::full(&[3, 2, 4], 4.5);
        let (y, _) = affine_norm(&c, NormAxes::Channel(1), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), Mode::Train, None, 1e-5)
            .unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_without_running_stats_fails() {
        let r = affine_norm(&x(), NormAxes::Channel(1), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), Mode::Eval, None, 1e-5);
        assert!(matches!(r, Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut rs = RunningStats::identity(2);
        let c = Tensor::full(&[3, 2, 4], 2.0);
        affine_norm(&c, NormAxes::Channel(1), &Tensor::ones(&[2]), &Tensor::zeros(&[2]), Mode::Train, Some(&mut rs), 1e-5)
            .unwrap();
        assert!((rs.mean[0] - 0.2f64).abs() < 1e-15);
        assert!((rs.var[0] - 0.9f64).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let (y, _) = affine_norm(&x(), NormAxes::Trailing, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), Mode::Eval, None, 1e-12)
            .unwrap();
        for r in 0..6 {
            let row = &y.data()[r * 4..r * 4 + 4];
            let m: f64 = row.iter().sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
        }
    }
}

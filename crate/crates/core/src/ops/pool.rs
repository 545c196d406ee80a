//! Adaptive average / max pooling over one or two spatial axes.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

/// Input index window `[floor(i*n/m), ceil((i+1)*n/m))` of output bin `i`.
pub fn bin_window(i: usize, n: usize, m: usize) -> (usize, usize) {
    let start = i * n / m;
    let end = ((i + 1) * n).div_ceil(m);
    (start, end)
}

fn planes<T: Scalar>(x: &Tensor<T>, out_spatial: &[usize]) -> Result<(usize, (usize, usize), (usize, usize), Vec<usize>)> {
    const OP: &str = "adaptive_pool";
    let rank = x.rank();
    if rank != 3 && rank != 4 {
        return Err(shape_err(OP, "rank", format!("input must be [b,c,*spatial], got {:?}", x.shape())));
    }
    if out_spatial.len() != rank - 2 {
        return Err(arg_err(OP, format!("{} output extents for {} spatial axes", out_spatial.len(), rank - 2)));
    }
    if let Some(a) = out_spatial.iter().position(|&e| e == 0) {
        return Err(arg_err(OP, format!("output extent on spatial axis {a} must be positive")));
    }
    let bc = x.shape()[0] * x.shape()[1];
    let (inp, out) = if rank == 3 {
        ((1, x.shape()[2]), (1, out_spatial[0]))
    } else {
        ((x.shape()[2], x.shape()[3]), (out_spatial[0], out_spatial[1]))
    };
    let mut shape = x.shape()[..2].to_vec();
    shape.extend_from_slice(out_spatial);
    Ok((bc, inp, out, shape))
}

/// Pools each `(b, c)` plane to `out_spatial`. Max ties resolve to the first
/// maximal element in row-major scan order.
pub fn adaptive_pool<T: Scalar>(x: &Tensor<T>, out_spatial: &[usize], kind: PoolKind) -> Result<Tensor<T>> {
    let (bc, (h, w), (ho, wo), shape) = planes(x, out_spatial)?;
    let xd = x.data();
    let mut y = Vec::with_capacity(bc * ho * wo);
    for p in 0..bc {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let (r0, r1) = bin_window(i, h, ho);
            for j in 0..wo {
                let (c0, c1) = bin_window(j, w, wo);
                y.push(match kind {
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for r in r0..r1 {
                            for c in c0..c1 {
                                s += plane[r * w + c];
                            }
                        }
                        s / T::from_usize_lossy((r1 - r0) * (c1 - c0))
                    }
                    PoolKind::Max => plane[argmax(plane, w, (r0, r1), (c0, c1))],
                });
            }
        }
    }
    Tensor::new(&shape, y)
}

fn argmax<T: Scalar>(plane: &[T], w: usize, rows: (usize, usize), cols: (usize, usize)) -> usize {
    let mut best = rows.0 * w + cols.0;
    for r in rows.0..rows.1 {
        for c in cols.0..cols.1 {
            if plane[r * w + c] > plane[best] {
                best = r * w + c;
            }
        }
    }
    best
}

pub fn adaptive_pool_vjp<T: Scalar>(
    x: &Tensor<T>,
    out_spatial: &[usize],
    kind: PoolKind,
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (bc, (h, w), (ho, wo), shape) = planes(x, out_spatial)?;
    gy.expect_shape("adaptive_pool_vjp", &shape)?;
    let (xd, gd) = (x.data(), gy.data());
    let mut gx = vec![T::zero(); x.len()];
    for p in 0..bc {
        let plane = &xd[p * h * w..(p + 1) * h * w];
        let gplane = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let (r0, r1) = bin_window(i, h, ho);
            for j in 0..wo {
                let (c0, c1) = bin_window(j, w, wo);
                let g = gd[(p * ho + i) * wo + j];
                match kind {
                    PoolKind::Avg => {
                        let share = g / T::from_usize_lossy((r1 - r0) * (c1 - c0));
                        for r in r0..r1 {
                            for c in c0..c1 {
                                gplane[r * w + c] += share;
                            }
                        }
                    }
                    PoolKind::Max => gplane[argmax(plane, w, (r0, r1), (c0, c1))] += g,
                }
            }
        }
    }
    Tensor::new(x.shape(), gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_input_without_gaps() {
        for n in 1..12 {
            for m in 1..12 {
                let mut covered = vec![false; n];
                for i in 0..m {
                    let (s, e) = bin_window(i, n, m);
                    assert!(s < e, "empty bin n={n} m={m} i={i}");
                    covered[s..e].iter_mut().for_each(|c| *c = true);
                }
                assert!(covered.iter().all(|&c| c));
            }
        }
    }

    #[test]
    fn four_by_four_to_two_by_two() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], |i| (i + 1) as f64);
        let y = adaptive_pool(&x, &[2, 2], PoolKind::Avg).unwrap();
        assert_eq!(y.data(), &[3.5, 5.5, 11.5, 13.5]);
        let y = adaptive_pool(&x, &[2, 2], PoolKind::Max).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn constant_and_identity() {
        let c = Tensor::<f64>::full(&[2, 3, 5, 7], 1.25);
        for kind in [PoolKind::Avg, PoolKind::Max] {
            let y = adaptive_pool(&c, &[3, 2], kind).unwrap();
            assert!(y.data().iter().all(|&v| v == 1.25));
            let x = Tensor::<f64>::from_fn(&[2, 3, 5, 7], |i| (i as f64 * 0.37).sin());
            assert_eq!(adaptive_pool(&x, &[5, 7], kind).unwrap(), x);
        }
    }

    #[test]
    fn zero_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(adaptive_pool(&x, &[0, 2], PoolKind::Avg).is_err());
    }

    #[test]
    fn max_ties_route_to_first() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 3.0);
        let gy = Tensor::full(&[1, 1, 1, 1], 1.0);
        let gx = adaptive_pool_vjp(&x, &[1, 1], PoolKind::Max, &gy).unwrap();
        assert_eq!(gx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }
}

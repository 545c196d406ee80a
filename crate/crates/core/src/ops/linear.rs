//! Bias-free grouped linear map over the trailing axis.

use crate::error::{arg_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<T: Scalar>(x: &Tensor<T>, wg: &Tensor<T>, groups: usize) -> Result<(usize, usize, usize, Vec<usize>)> {
    const OP: &str = "grouped_linear";
    if wg.rank() != 2 {
        return Err(shape_err(OP, "weight rank", format!("weight must be [c/g, o/g], got {:?}", wg.shape())));
    }
    if groups == 0 {
        return Err(arg_err(OP, "groups must be positive"));
    }
    let c = *x.shape().last().ok_or_else(|| shape_err(OP, "rank", "input has no axes"))?;
    if c % groups != 0 {
        return Err(shape_err(OP, "last axis", format!("{c} features not divisible by {groups} groups")));
    }
    let (cg, og) = (wg.shape()[0], wg.shape()[1]);
    if cg != c / groups {
        return Err(shape_err(OP, "weight axis 0", format!("expected {} rows per group, weight has {cg}", c / groups)));
    }
    let rows = x.len() / c;
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = og * groups;
    Ok((rows, cg, og, shape))
}

/// `y[.., j*og + q] = sum_p x[.., j*cg + p] * wg[p, q]` for every group `j`;
/// the same weight serves all groups and all leading positions.
pub fn grouped_linear<T: Scalar>(x: &Tensor<T>, wg: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (rows, cg, og, shape) = dims(x, wg, groups)?;
    let (xd, wd) = (x.data(), wg.data());
    let (c, o) = (cg * groups, og * groups);
    let mut y = vec![T::zero(); rows * o];
    for r in 0..rows {
        for j in 0..groups {
            let xin = &xd[r * c + j * cg..r * c + (j + 1) * cg];
            let out = &mut y[r * o + j * og..r * o + (j + 1) * og];
            for (p, &xv) in xin.iter().enumerate() {
                let wrow = &wd[p * og..(p + 1) * og];
                for (acc, &wv) in out.iter_mut().zip(wrow) {
                    *acc += xv * wv;
                }
            }
        }
    }
    Tensor::new(&shape, y)
}

/// Returns `(dx, dwg)`.
pub fn grouped_linear_vjp<T: Scalar>(
    x: &Tensor<T>,
    wg: &Tensor<T>,
    groups: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, cg, og, shape) = dims(x, wg, groups)?;
    gy.expect_shape("grouped_linear_vjp", &shape)?;
    let (xd, wd, gd) = (x.data(), wg.data(), gy.data());
    let (c, o) = (cg * groups, og * groups);
    let mut gx = vec![T::zero(); x.len()];
    let mut gw = vec![T::zero(); wg.len()];
    for r in 0..rows {
        for j in 0..groups {
            let g = &gd[r * o + j * og..r * o + (j + 1) * og];
            for p in 0..cg {
                let xi = r * c + j * cg + p;
                let wrow = &wd[p * og..(p + 1) * og];
                let gwrow = &mut gw[p * og..(p + 1) * og];
                let mut acc = T::zero();
                for q in 0..og {
                    acc += g[q] * wrow[q];
                    gwrow[q] += xd[xi] * g[q];
                }
                gx[xi] += acc;
            }
        }
    }
    Ok((Tensor::new(x.shape(), gx)?, Tensor::new(wg.shape(), gw)?))
}

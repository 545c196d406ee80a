//! Pointwise activations and broadcasting binary arithmetic.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Mul,
}

/// Overflow-free logistic function; `sigmoid(0)` is exactly `0.5`.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn unary<T: Scalar>(x: &Tensor<T>, f: Unary) -> Tensor<T> {
    match f {
        Unary::Sigmoid => x.map(sigmoid),
        Unary::Relu => x.map(|v| if v > T::zero() { v } else { T::zero() }),
    }
}

/// Gradient of [`unary`] given its input `x` and output `y`.
///
/// ReLU takes slope 1 at exactly zero. Zero-initialized gate normalizations
/// produce exact zeros at the ReLU input, and this subgradient is what lets
/// the gate path receive a gradient on the first step.
pub fn unary_vjp<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, f: Unary, gy: &Tensor<T>) -> Result<Tensor<T>> {
    match f {
        Unary::Sigmoid => y.zip_map(gy, |s, g| g * s * (T::one() - s)),
        Unary::Relu => x.zip_map(gy, |v, g| if v >= T::zero() { g } else { T::zero() }),
    }
}

/// Result shape of broadcasting `a` against `b`: equal ranks, each axis
/// equal or 1 on one side.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, "rank", format!("{a:?} vs {b:?}: ranks differ")));
    }
    a.iter()
        .zip(b)
        .enumerate()
        .map(|(i, (&x, &y))| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(shape_err(op, format!("axis {i}"), format!("{a:?} vs {b:?}: {x} and {y} do not broadcast"))),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (0 on broadcast axes).
fn view_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&e, &o))| if e == 1 && o != 1 { 0 } else { s })
        .collect()
}

/// Visits every output element with the matching flat offsets into `a`, `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..total {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: Binary) -> Result<Tensor<T>> {
    let out = broadcast_shape("elementwise", a.shape(), b.shape())?;
    let (sa, sb) = (view_strides(a.shape(), &out), view_strides(b.shape(), &out));
    let mut y = vec![T::zero(); out.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| {
        y[i] = match f {
            Binary::Add => ad[ia] + bd[ib],
            Binary::Mul => ad[ia] * bd[ib],
        }
    });
    Tensor::new(&out, y)
}

/// Returns `(da, db)`, each summed back over its broadcast axes.
pub fn binary_vjp<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: Binary, gy: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let out = broadcast_shape("elementwise_vjp", a.shape(), b.shape())?;
    gy.expect_shape("elementwise_vjp", &out)?;
    let (sa, sb) = (view_strides(a.shape(), &out), view_strides(b.shape(), &out));
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); b.len()];
    let (ad, bd, gd) = (a.data(), b.data(), gy.data());
    for_each_broadcast(&out, &sa, &sb, |i, ia, ib| match f {
        Binary::Add => {
            ga[ia] += gd[i];
            gb[ib] += gd[i];
        }
        Binary::Mul => {
            ga[ia] += gd[i] * bd[ib];
            gb[ib] += gd[i] * ad[ia];
        }
    });
    Ok((Tensor::new(a.shape(), ga)?, Tensor::new(b.shape(), gb)?))
}

/// Materializes `x` broadcast to `shape`.
pub fn broadcast_to<T: Scalar>(x: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let out = broadcast_shape("broadcast_to", x.shape(), shape)?;
    if out != shape {
        return Err(shape_err("broadcast_to", "target", format!("{:?} cannot broadcast to {shape:?}", x.shape())));
    }
    let sx = view_strides(x.shape(), &out);
    let zero = vec![0; out.len()];
    let mut y = vec![T::zero(); out.iter().product()];
    let xd = x.data();
    for_each_broadcast(&out, &sx, &zero, |i, ix, _| y[i] = xd[ix]);
    Tensor::new(&out, y)
}

/// Sums `gy` (of the broadcast shape) back onto `shape`.
pub fn reduce_to<T: Scalar>(gy: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    let sx = view_strides(shape, gy.shape());
    let zero = vec![0; shape.len()];
    let mut g = vec![T::zero(); shape.iter().product()];
    let gd = gy.data();
    for_each_broadcast(gy.shape(), &sx, &zero, |i, ix, _| g[ix] += gd[i]);
    Tensor::new(shape, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_points() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        for x in [-30.0, -2.5, -0.1, 0.7, 4.0, 800.0, -800.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0f64).abs() < 1e-15);
            assert!(sigmoid(x).is_finite());
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::<f64>::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(unary(&x, Unary::Relu).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn broadcasting_add() {
        let a = Tensor::<f64>::new(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = binary(&a, &b, Binary::Add).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[11.0, 21.0, 31.0, 12.0, 22.0, 32.0]);
        let (ga, gb) = binary_vjp(&a, &b, Binary::Add, &Tensor::ones(&[2, 3])).unwrap();
        assert_eq!(ga.data(), &[3.0, 3.0]);
        assert_eq!(gb.data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(binary(&a, &b, Binary::Mul).is_err());
        assert!(binary(&a, &Tensor::zeros(&[3]), Binary::Mul).is_err());
    }

    #[test]
    fn broadcast_then_reduce() {
        let x = Tensor::<f64>::new(&[1, 2, 1], vec![1.0, 2.0]).unwrap();
        let y = broadcast_to(&x, &[3, 2, 2]).unwrap();
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
        assert_eq!(reduce_to(&y, &[1, 2, 1]).unwrap().data(), &[6.0, 12.0]);
    }
}

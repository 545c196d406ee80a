//! Reverse-mode differentiation over a recorded sequence of operations.
//!
//! Every method on [`Tape`] evaluates one operation eagerly, appends it to the
//! record and returns a handle. [`Tape::backward`] walks the record in
//! reverse and applies each operation's vector-Jacobian product.

use crate::error::{Error, Result};
use crate::ops::{self, Binary, ConvSpec, Mode, NormAxes, NormCache, PoolKind, RunningStats, Unary};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, spec: ConvSpec },
    Pool { x: Var, out: Vec<usize>, kind: PoolKind },
    Linear { x: Var, w: Var, groups: usize },
    Norm { x: Var, gamma: Var, beta: Var, axes: NormAxes, cache: NormCache<T> },
    Unary { x: Var, f: Unary },
    Binary { a: Var, b: Var, f: Binary },
    Reshape { x: Var },
    Transpose { x: Var },
    BroadcastTo { x: Var },
    PadLast { x: Var },
    Subsample { x: Var, stride: usize, out_channels: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    scope: String,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            scope: String::new(),
        }
    }

    /// Label attached to non-finite errors raised by subsequent operations.
    pub fn set_scope(&mut self, scope: impl Into<String>) {
        self.scope = scope.into();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: name.to_string(),
                layer: if self.scope.is_empty() { "<unscoped>".into() } else { self.scope.clone() },
            });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf)
    }

    pub fn conv(&mut self, x: Var, w: Var, spec: &ConvSpec) -> Result<Var> {
        let y = ops::conv_nd(self.value(x), self.value(w), spec)?;
        self.push("conv", y, Op::Conv { x, w, spec: spec.clone() })
    }

    pub fn adaptive_pool(&mut self, x: Var, out: &[usize], kind: PoolKind) -> Result<Var> {
        let y = ops::adaptive_pool(self.value(x), out, kind)?;
        self.push("adaptive_pool", y, Op::Pool { x, out: out.to_vec(), kind })
    }

    pub fn grouped_linear(&mut self, x: Var, w: Var, groups: usize) -> Result<Var> {
        let y = ops::grouped_linear(self.value(x), self.value(w), groups)?;
        self.push("grouped_linear", y, Op::Linear { x, w, groups })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axes: NormAxes,
        mode: Mode,
        running: Option<&mut RunningStats<T>>,
        eps: T,
    ) -> Result<Var> {
        let (y, cache) = ops::affine_norm(self.value(x), axes, self.value(gamma), self.value(beta), mode, running, eps)?;
        self.push("affine_norm", y, Op::Norm { x, gamma, beta, axes, cache })
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Result<Var> {
        let y = ops::unary(self.value(x), f);
        self.push(match f { Unary::Sigmoid => "sigmoid", Unary::Relu => "relu" }, y, Op::Unary { x, f })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        let y = ops::binary(self.value(a), self.value(b), f)?;
        self.push(match f { Binary::Add => "add", Binary::Mul => "mul" }, y, Op::Binary { a, b, f })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        self.push("reshape", y, Op::Reshape { x })
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let y = ops::transpose_last2(self.value(x))?;
        self.push("transpose", y, Op::Transpose { x })
    }

    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = ops::broadcast_to(self.value(x), shape)?;
        self.push("broadcast_to", y, Op::BroadcastTo { x })
    }

    pub fn pad_last(&mut self, x: Var, len: usize) -> Result<Var> {
        let y = ops::pad_last(self.value(x), len)?;
        self.push("pad_last", y, Op::PadLast { x })
    }

    pub fn subsample_pad(&mut self, x: Var, stride: usize, out_channels: usize) -> Result<Var> {
        let y = ops::subsample_pad(self.value(x), stride, out_channels)?;
        self.push("subsample_pad", y, Op::Subsample { x, stride, out_channels })
    }

    /// Mean cross-entropy; the result is a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        self.push(
            "cross_entropy",
            Tensor::full(&[1], loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
        )
    }

    /// Gradients of `sum(upstream * value(out))` with respect to every
    /// recorded value.
    pub fn backward_with(&self, out: Var, upstream: Tensor<T>) -> Result<Gradients<T>> {
        upstream.expect_shape("backward", self.value(out).shape())?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(upstream);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            let val = |v: Var| &self.nodes[v.0].value;
            let mut contrib: Vec<(Var, Tensor<T>)> = Vec::with_capacity(3);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Conv { x, w, spec } => {
                    let (gx, gw) = ops::conv_nd_vjp(val(*x), val(*w), spec, &g)?;
                    contrib.push((*x, gx));
                    contrib.push((*w, gw));
                }
                Op::Pool { x, out, kind } => {
                    contrib.push((*x, ops::adaptive_pool_vjp(val(*x), out, *kind, &g)?));
                }
                Op::Linear { x, w, groups } => {
                    let (gx, gw) = ops::grouped_linear_vjp(val(*x), val(*w), *groups, &g)?;
                    contrib.push((*x, gx));
                    contrib.push((*w, gw));
                }
                Op::Norm { x, gamma, beta, axes, cache } => {
                    let (gx, gg, gb) = ops::affine_norm_vjp(cache, *axes, val(*gamma), &g)?;
                    contrib.push((*x, gx));
                    contrib.push((*gamma, gg));
                    contrib.push((*beta, gb));
                }
                Op::Unary { x, f } => {
                    contrib.push((*x, ops::unary_vjp(val(*x), &node.value, *f, &g)?));
                }
                Op::Binary { a, b, f } => {
                    let (ga, gb) = ops::binary_vjp(val(*a), val(*b), *f, &g)?;
                    contrib.push((*a, ga));
                    contrib.push((*b, gb));
                }
                Op::Reshape { x } => contrib.push((*x, g.into_reshape(val(*x).shape())?)),
                Op::Transpose { x } => contrib.push((*x, ops::transpose_last2(&g)?)),
                Op::BroadcastTo { x } => contrib.push((*x, ops::reduce_to(&g, val(*x).shape())?)),
                Op::PadLast { x } => contrib.push((*x, ops::shape::pad_last_vjp(val(*x).shape(), &g)?)),
                Op::Subsample { x, stride, out_channels } => {
                    contrib.push((*x, ops::shape::subsample_pad_vjp(val(*x).shape(), *stride, *out_channels, &g)?));
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    contrib.push((*logits, ops::softmax_cross_entropy_vjp(probs, labels, g.data()[0])));
                }
            }
            for (v, gv) in contrib {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&gv)?,
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradients of a one-element output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        let shape = self.value(out).shape().to_vec();
        self.backward_with(out, Tensor::ones(&shape))
    }
}

/// Gradients of leaves after [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like it when no path reached it.
    pub fn get_or_zeros(&self, v: Var, tape: &Tape<T>) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_input_accumulates() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::new(&[2], vec![1.5, -2.0]).unwrap()).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward_with(y, Tensor::ones(&[2])).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0]);
    }

    #[test]
    fn non_finite_names_scope() {
        let mut t = Tape::<f64>::new();
        t.set_scope("conv3");
        let err = t.leaf(Tensor::full(&[1], f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("conv3"), "{err}");
    }
}

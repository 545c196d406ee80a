//! Differentiable tensor operations. Each forward function has a matching
//! `*_vjp` that maps an upstream gradient to gradients of its inputs.

pub mod conv;
pub mod elementwise;
pub mod linear;
pub mod loss;
pub mod norm;
pub mod pool;
pub mod shape;

pub use conv::{conv_nd, conv_nd_vjp, conv_out_extent, ConvSpec};
pub use elementwise::{binary, binary_vjp, broadcast_to, reduce_to, sigmoid, unary, unary_vjp, Binary, Unary};
pub use linear::{grouped_linear, grouped_linear_vjp};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_vjp};
pub use norm::{affine_norm, affine_norm_vjp, Mode, NormAxes, NormCache, RunningStats, DEFAULT_EPS, DEFAULT_MOMENTUM};
pub use pool::{adaptive_pool, adaptive_pool_vjp, bin_window, PoolKind};
pub use shape::{pad_last, subsample_pad, transpose_last2};

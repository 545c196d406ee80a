//! Tensors with reverse-mode differentiation, context-gated convolution
//! layers, cost accounting for convolutional architectures, a small training
//! harness and gate analysis.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the element type.

pub mod analysis;
pub mod arch;
pub mod cgc;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod scalar;
pub mod serialize;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
pub type CgcLayer32 = cgc::CgcLayer<f32>;
pub type CgcLayer64 = cgc::CgcLayer<f64>;

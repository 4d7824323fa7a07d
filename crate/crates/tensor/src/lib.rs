//! Minimal dense tensors with tape-based reverse-mode differentiation.
//!
//! Everything is generic over [`Scalar`] (`f32` for inference, `f64` for
//! gradient checking). [`Tape`] records operations; [`Var`] is a value on a
//! tape. Convolutions use the cross-correlation convention and bilinear
//! resizing samples with aligned corners.

pub mod error;
pub mod gradcheck;
pub mod kernels;
mod ops;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{gradcheck, GradcheckOptions, GradcheckReport, LeafReport};
pub use kernels::gemm::{num_threads, set_num_threads};
pub use scalar::{DType, Scalar};
pub use tape::{BackwardFn, Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

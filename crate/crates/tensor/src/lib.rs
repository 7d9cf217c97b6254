//! Dense CPU tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: a [`Tape`] records each forward
//! operation with its backward rule, and [`Tape::backward`] replays them in
//! reverse. Execution is single-threaded, so results are bit-reproducible.

// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod error;
#[cfg(any(test, feature = "gradcheck"))]
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use params::{Graph, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, NORM_EPS, PROB_CLAMP};
pub use tensor::{Scalar, Tensor};

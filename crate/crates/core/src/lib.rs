//! Attention-guided adversarial domain alignment for a toy single-stage
//! detector.

// `!(x >= 0.0)` style checks deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod attention;
pub mod cli;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod harness;
pub mod nn;

pub use error::{Error, Result};

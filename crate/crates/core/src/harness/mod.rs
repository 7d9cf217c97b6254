//! Training loop, evaluation and experiment bookkeeping.

mod config;
mod eval;
mod train;

pub use config::*;
pub use eval::*;
pub use train::*;

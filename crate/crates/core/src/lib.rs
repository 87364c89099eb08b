//! Principal-agent mean-field game solver for REC markets: a deep BSDE
//! engine for the agents' equilibrium and a surrogate-driven outer loop for
//! the principal's penalty design.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod bundle;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod diagnostics;
pub mod error;
pub mod fbsde;
pub mod nn;
pub mod orchestrator;
pub mod principal;
pub mod rec;
pub mod seed;

pub use error::{Error, Result};

//! Library side of the `emlab` command-line tool: configuration parsing and
//! the command implementations, kept out of `main` so tests can drive them.

// `!(x > y)` is used on purpose: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{Output, Status};
pub use config::{ExperimentConfig, Precision};

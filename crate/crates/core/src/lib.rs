// `!(a < b)` is used on purpose so NaN fails the check.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod design_cycle;
pub mod config;
pub mod error;
pub mod gp;
pub mod margins;
pub mod optim;
pub mod output;
pub mod problems;
pub mod rbdo;
pub mod reliability;
pub mod stats;
pub mod uq;

pub use error::{Error, Result};

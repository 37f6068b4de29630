// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod experiments;
pub mod linalg;
pub mod nn;
pub mod optim;
pub mod regularizers;

pub use error::{Error, Result};
pub use linalg::Matrix;

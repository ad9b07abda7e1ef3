// NaN-rejecting guards are written as negated comparisons.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dubins;
pub mod error;
pub mod measure;
pub mod quad;
pub mod sim;
pub mod stats;
pub mod vallois;

pub use error::{Error, Result};

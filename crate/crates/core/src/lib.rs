//! Critical exponents, pressure curves and cusp metrics for geometrically
//! finite surfaces with a parabolic cusp.

// `!(x > y)` is used deliberately so that NaN takes the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod cusp_metric;
pub mod dynamics;
pub mod error;
pub mod groups;
pub mod hyperbolic;
pub mod numerics;
pub mod potentials;
pub mod pressure;
pub mod series;

pub use error::{Error, Result};

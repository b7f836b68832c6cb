// `!(x > 0.0)` style guards are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod baselines;
pub mod doppler;
pub mod error;
pub mod evaluate;
pub mod factor_graph;
pub mod geometry;
pub mod io;
pub mod lambda;
pub mod measurement;
pub mod pipeline;
pub mod simulator;
pub mod types;

pub use error::{Error, Result};
pub use nalgebra;

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod apdsim;
pub mod cli;
pub mod config;
pub mod error;
pub mod protocol;
pub mod rng;
pub mod sdcore;
pub mod signal;
pub mod stats;

pub use error::{Error, Result};

//! Episode-wise dropout exploration for policy optimization.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod dropoutdist;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod plot;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod tensorgraph;

pub use error::{Error, Result};

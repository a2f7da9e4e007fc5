// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptloop;
pub mod belief;
pub mod dataset;
pub mod error;
pub mod featurize;
pub mod fsutil;
pub mod igtools;
pub mod market_sim;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};

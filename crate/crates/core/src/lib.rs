//! Deep functional factor model for high-dimensional functional time series.
//!
//! Observations `Y_t(u)` are modelled as `A·X_t(u) + noise`, where the
//! loading matrix carries an Indian-buffet-process sparsity prior and the
//! factor curves follow a multi-task Gaussian process whose temporal kernel
//! is built from a sequential neural encoder.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod gauss;
pub mod ibp;
pub mod kernels;
pub mod linalg;
pub mod mtgp;
pub mod rng;
pub mod data;
pub mod eval;
pub mod model;
pub mod simulate;
pub mod trainer;
pub mod seqnets;

pub use error::{Error, Result};

//! Ensemble square root filters, their continuous-time limit and a
//! convergence harness.
// NaN-rejecting guards are written as `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checks;
pub mod config;
pub mod error;
pub mod filter;
pub mod harness;
pub mod linalg;
pub mod kalman;
pub mod limit;
pub mod model;
pub mod perturbation;

pub use error::{EsrfError, Result};
pub use linalg::{Mat, PsdMatrix, Vector};

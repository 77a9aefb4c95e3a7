//! Tail-averaged constant-stepsize SGD for least squares.
//!
//! The crate simulates the SGD process, computes the stationary covariance
//! of its iterates with two independent solvers, and evaluates the finite
//! sample risk bound for the tail-averaged iterate, including its bias and
//! variance pieces.

// `!(x > 0.0)` is used deliberately so NaN falls into the error branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod distributions;
pub mod error;
pub mod harness;
pub mod matcore;
pub mod sgd;
pub mod stationary;

pub use distributions::{
    estimate_moments, exact_moments, DistributionConfig, DistributionKind, DistributionSpec,
    Exactness, MisspecFn, Moments, SampleStream, SupportPoint,
};
pub use error::{Error, Result};
pub use matcore::{SpdMat, SymMat, SymVecIndex, Vector};

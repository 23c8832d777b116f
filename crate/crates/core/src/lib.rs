//! Convex regression with an `L_inf` subgradient penalty.
//!
//! Fits are max-affine functions obtained from finite-dimensional quadratic
//! programs: penalized least squares (estimator A), least squares with a
//! gradient bound (B), and the minimal gradient bound meeting an error cap
//! (C). A simulated M/M/1 queue supplies the benchmark regression target.

pub mod error;
pub mod estimators;
pub mod experiments;
pub mod hyperparams;
pub mod max_affine;
pub mod qp;
pub mod queue_sim;

pub use error::{Error, Result};
pub use estimators::{Dataset, Estimator, FitResult, FitSpec};
pub use max_affine::{Domain, MaxAffineModel, Piece};
pub use qp::{solve_qp, QpProblem, QpSolution, QpStatus, SolverTolerances};

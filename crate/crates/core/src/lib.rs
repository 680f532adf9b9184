//! Occupancy counts for capacity-constrained balls-into-bins allocations.
//!
//! `n` distinguishable balls are placed uniformly at random into `N`
//! distinguishable bins, conditioned on no bin holding more than `C` balls.
//! `X_m` is the number of bins holding exactly `m` balls. This crate computes
//! and checks the joint high-moment central limit behaviour of
//! `(X_{m_1}, ..., X_{m_r})`:
//!
//! - [`occupancy`]: exact (big integer) and log-domain counts `M_n(N, C)` of
//!   admissible placements, plus a brute-force enumeration oracle.
//! - [`tilted`]: the Poisson law conditioned on `W <= C`, the tilt solver for
//!   `E W(lambda_0) = n/N` and the local-limit approximation of `M_n(N, C)`.
//! - [`moments`]: exact joint factorial moments, their Gaussian-type
//!   asymptotic form and grid comparisons between the two.
//! - [`covariance`]: the covariance matrix read off from the moment
//!   asymptotics, closed-form eigenstructure for the near-degenerate cases,
//!   symmetric square roots and the hypothesis diagnostics.
//! - [`simulator`]: exact seeded samplers, standardization and empirical
//!   normality statistics.
//! - [`cli`]: the `urnclt` command-line front end.

#![forbid(unsafe_code)]

pub mod cli;
pub mod covariance;
pub mod linalg;
pub mod moments;
pub mod occupancy;
pub mod simulator;
pub mod special;
pub mod stats;
pub mod tilted;

pub use covariance::{ConditionReport, CovModel};
pub use moments::{MomentOrder, OccupancyProfile};
pub use occupancy::{AllocationParams, ExactCountTable, LogCountTable};
pub use simulator::{SampleBatch, SamplerConfig, SamplerMethod};
pub use tilted::{TiltSolution, TiltedPoisson};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("infeasible allocation: {n} balls do not fit into {bins} bins of capacity {capacity}")]
    Infeasible { n: u64, bins: u64, capacity: u32 },

    #[error("no interior tilt root: n/N = {load} must lie strictly inside (0, {capacity})")]
    NoInteriorRoot { load: f64, capacity: u32 },

    #[error("budget exceeded: {what} needs {required}, limit is {limit}")]
    Budget {
        what: &'static str,
        required: f64,
        limit: f64,
    },

    #[error("matrix is not positive definite (eigenvalue {eigenvalue:e})")]
    NotPositiveDefinite { eigenvalue: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("falling factorial [{x}]_{k} has a non-positive factor")]
    FallingFactorialDomain { x: f64, k: u64 },

    #[error("too few samples: {found} < {required}")]
    TooFewSamples { found: usize, required: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("manifest: {0}")]
    Manifest(String),
}

pub type Result<T> = std::result::Result<T, Error>;

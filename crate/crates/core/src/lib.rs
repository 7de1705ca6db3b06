//! Simulation and verification laboratory for the stochastic-gradient
//! dynamics of ICA tensor decomposition.
//!
//! The library is organized around one pipeline:
//!
//! * [`source`] — synthetic source models (finite-support and uniform laws,
//!   orthogonal mixing) with exact moment tables,
//! * [`moments`] — an exact-rational moment engine (weighted power moments,
//!   cross moments, exhaustive enumeration oracle),
//! * [`sgd`] — the projected stochastic-gradient iteration on the unit
//!   sphere, per-step decomposition, and deterministic replicate ensembles,
//! * [`limits`] — deterministic (ODE) and diffusion (OU) limit objects with
//!   closed forms, fixed-step integrators, and traverse-time bounds,
//! * [`phases`] — detection of the three dynamical phases on simulated
//!   trajectories and comparison against predicted iteration counts,
//! * [`experiment`] — plain-text configuration, orchestration, and the
//!   on-disk CSV/JSON artifact formats.
//!
//! All randomness flows through counter-mode generators seeded from a master
//! seed plus a replicate index, so every ensemble statistic is reproducible
//! bit-for-bit regardless of worker count.

pub mod experiment;
pub mod limits;
pub mod moments;
pub mod phases;
pub mod sgd;
pub mod source;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A source-model parameter is outside its admissible range.
    #[error("invalid source model: {0}")]
    InvalidSource(String),

    /// Vector or matrix dimensions do not agree.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A numeric argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The step-size guard bound^2 * beta <= 2/3 fails.
    #[error("step size too large: bound^2 * beta = {product:.6} > 2/3")]
    StepSizeGuard { product: f64 },

    /// Exhaustive enumeration would visit more states than the budget allows.
    #[error("enumeration budget exceeded: {states} states > {budget}")]
    EnumerationBudget { states: u128, budget: u128 },

    /// Enumeration requested for a source without finite support.
    #[error("source has no finite support: {0}")]
    NoFiniteSupport(String),

    /// A trajectory or ensemble statistic never met a detection condition.
    #[error("detection failed: {0}")]
    Detection(String),

    /// An iterate has not converged to a signed component.
    #[error("not converged: {0}")]
    NotConverged(String),

    /// Configuration text could not be parsed or validated.
    #[error("config error: {0}")]
    Config(String),

    /// Underlying I/O failure while writing or reading artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

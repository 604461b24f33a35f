//! Error types shared across the crate.

use crate::data::Arm;
use thiserror::Error;

/// Errors produced by dataset handling, model fitting, weighting and
/// simulation routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// A precondition on an operation's input was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A treatment arm has no members.
    #[error("treatment arm ({}, {}) has no members", arm.a, arm.b)]
    EmptyArm { arm: Arm },

    /// Formula text could not be parsed; `position` is the byte offset of
    /// the offending token.
    #[error("formula parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    /// A formula references a covariate that does not exist in the dataset.
    #[error("unknown variable `{0}`")]
    UnknownVariable(String),

    /// A transformation was evaluated outside its domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// The likelihood is unbounded (perfect separation) or the fitting
    /// Hessian is irreparably singular.
    #[error("separation detected while fitting: {0}")]
    Separation(String),

    /// Newton iterations exhausted without meeting the score tolerance.
    #[error("model fit did not converge within {iterations} iterations")]
    NonConvergence { iterations: usize },

    /// The dual minimization for empirical-likelihood weights failed.
    #[error("dual solve did not converge within {iterations} iterations (residual {residual:.3e})")]
    DualNonConvergence { iterations: usize, residual: f64 },

    /// Every constraint column was removed by the collinearity filter.
    #[error("all constraint columns dropped for arm ({}, {})", arm.a, arm.b)]
    AllColumnsDropped { arm: Arm },

    /// A balance metric was requested for a covariate with zero pooled
    /// standard deviation.
    #[error("covariate `{0}` is constant; standardized metrics are undefined")]
    ConstantCovariate(String),

    /// Too many bootstrap replicates or simulation runs failed.
    #[error("too many failures: {failed} of {total} exceeded the 10% ceiling ({context})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        context: String,
    },

    /// The initial calibration interval does not straddle the target.
    #[error("calibration bracket [{lo}, {hi}] does not straddle target prevalence {target}")]
    Bracket { lo: f64, hi: f64, target: f64 },

    /// Prevalence calibration terminated without reaching the tolerance.
    #[error("calibration failed: {0}")]
    Calibration(String),
}

pub type Result<T> = std::result::Result<T, Error>;

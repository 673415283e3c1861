//! Functional bilevel optimization toolkit.
//!
//! The outer problem `min_w F(w) = L_out(w, h*_w)` is constrained by an inner
//! problem `h*_w = argmin_h L_in(w, h)` whose solution is a *function* (a
//! regression fit, a Q-function), not a parameter vector. The total gradient
//! of `F` is assembled from an adjoint function `a*_w` that solves a quadratic
//! problem in output space, so the Hessian-vector products involved have the
//! dimension of the function's output rather than of the inner network's
//! parameters.
//!
//! Module map:
//! - [`numkit`]: dense vectors/matrices, Cholesky and CG solvers, central
//!   finite differences, and a reproducible counter-based RNG.
//! - [`models`]: MLPs and linear-in-features models with manual reverse-mode
//!   parameter gradients (`vjp_params`).
//! - [`losses`]: point-wise inner/outer losses with value/gradient/Hessian
//!   bundles in output space.
//! - [`funcid`]: the functional-implicit-differentiation core: empirical
//!   objectives, inner/adjoint optimization, closed-form adjoint paths, the
//!   total-gradient assembly, and the outer loop.
//! - [`baselines`]: parametric implicit differentiation (AID), penalty
//!   methods, and model-based MLE for comparison.
//! - [`tasks`]: desk-scale benchmark generators (instrumented-regression,
//!   toy MDP, quadratic sanity instance).
//! - [`oracle`]: independent ground-truth solvers and finite-difference total
//!   gradients, used only by tests and bias diagnostics.
//! - [`harness`]: run configs, per-iteration records, CSV/JSON emission,
//!   sweeps, and the acceptance check suites.

pub mod baselines;
pub mod funcid;
pub mod harness;
pub mod losses;
pub mod models;
pub mod numkit;
pub mod oracle;
pub mod tasks;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shape mismatch between operands; reports the operation and both shapes.
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    Dim {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// Cholesky factorization hit a non-positive pivot, so the matrix is not
    /// positive definite (or not symmetric to working precision).
    #[error("matrix is not symmetric positive definite: pivot {pivot} is {value:.3e}")]
    NotSpd { pivot: usize, value: f64 },

    /// A public operation produced a NaN or infinity.
    #[error("non-finite value produced in {op}")]
    NonFinite { op: &'static str },

    /// Invalid configuration (bad key, malformed value, inconsistent section).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk artifact (dataset, checkpoint, instance file).
    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),

    /// A precondition of an algorithm was violated by the caller.
    #[error("invalid argument to {op}: {reason}")]
    InvalidArg { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

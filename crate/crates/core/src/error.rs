use thiserror::Error;

/// Errors raised by the numerical routines of this crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    Validation(String),

    /// A functional evaluated to a non-finite value at a finite-difference probe.
    #[error("non-finite functional value at entry ({row}, {col}) probe {probe}: {value}")]
    NonFiniteProbe {
        row: usize,
        col: usize,
        probe: &'static str,
        value: f64,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("step size underflow at t = {t} (h = {h:e})")]
    StepUnderflow { t: f64, h: f64 },

    #[error("non-finite derivative at t = {t}")]
    NonFiniteDerivative { t: f64 },

    #[error("outside domain: {0}")]
    Domain(String),

    /// The implicit angle system has a singular Jacobian.
    #[error("branch point at s = {s:?} (last iterate psi = ({psi1}, {psi2}))")]
    BranchPoint {
        s: Option<f64>,
        psi1: f64,
        psi2: f64,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e}, last psi = ({psi1}, {psi2}))")]
    NoConvergence {
        iterations: usize,
        residual: f64,
        psi1: f64,
        psi2: f64,
    },

    #[error("energy level {h} carries no motion on the leaf")]
    NoMotion { h: f64 },

    #[error("inconsistent state: {0}")]
    Consistency(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error types shared across the library.

use thiserror::Error;

/// Errors raised by construction, filtering and estimation routines.
#[derive(Debug, Clone, Error)]
pub enum Error {
    /// Two operators (or an operator and a state) have incompatible dimensions.
    #[error("dimension mismatch: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),

    /// A matrix failed a structural validation check (shape, Hermiticity,
    /// trace, positivity) at construction time.
    #[error("invalid operator: {0}")]
    InvalidOperator(String),

    /// Renormalization was asked to divide by a vanishing trace.
    #[error("degenerate renormalization: trace {trace:.6e} at or below {threshold:.0e}")]
    DegenerateTrace { trace: f64, threshold: f64 },

    /// A filter update produced a state with vanishing trace; carries the
    /// step index at which propagation stopped.
    #[error("degenerate update at step {step}: Kraus-map trace {trace:.6e} at or below {threshold:.0e}")]
    DegenerateUpdate {
        step: usize,
        trace: f64,
        threshold: f64,
    },

    /// Strict positivity monitoring found an eigenvalue below tolerance.
    #[error("positivity violation at step {step}: smallest eigenvalue {eigenvalue:.6e}")]
    PositivityViolation { step: usize, eigenvalue: f64 },

    /// A parameter value lies outside its declared bounds.
    #[error("parameter `{name}` = {value} outside bounds [{lo}, {hi}]")]
    OutOfBounds {
        name: String,
        value: f64,
        lo: f64,
        hi: f64,
    },

    /// A caller-supplied argument is unusable (empty stream, zero steps,
    /// bad index, inconsistent lengths, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A computation produced a non-finite number.
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = std::result::Result<T, Error>;

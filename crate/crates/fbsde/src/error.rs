use thiserror::Error;

/// Errors surfaced by the solver pipeline.
#[derive(Error, Debug)]
pub enum Error {
    /// A coefficient array or vector has the wrong shape.
    #[error("dimension mismatch in {operand}: expected {expected}, got {got}")]
    Dimension {
        operand: &'static str,
        expected: String,
        got: String,
    },

    /// A coefficient evaluation produced a non-finite value.
    #[error("{coefficient} evaluated to a non-finite value at t={t}, x={x:?}")]
    Evaluation {
        coefficient: &'static str,
        t: f64,
        x: Vec<f64>,
    },

    /// A per-step propagator factor is numerically singular.
    #[error(
        "singular step factor on path {path}, step {step}: |det| = {det:.3e} < 1e-14 \
         (condition estimate {cond:.3e})"
    )]
    SingularFactor {
        path: usize,
        step: usize,
        det: f64,
        cond: f64,
    },

    /// Least-squares normal equations could not be factorized.
    #[error("regression failed: {reason}; set ridge > 0 to regularize rank-deficient features")]
    Regression { reason: String },

    /// An operation precondition was violated.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Catalog lookup with an unknown name.
    #[error("unknown catalog problem {name:?}; available: {available:?}")]
    UnknownCatalog {
        name: String,
        available: Vec<&'static str>,
    },

    /// The autonomous scalar reduction is not available for this problem.
    #[error("scalar reduction unsupported: {0}")]
    ScalarReduction(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

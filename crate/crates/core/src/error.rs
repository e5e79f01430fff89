use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    /// The Newton iteration hit its cap. `best` is the Mandel vector of the
    /// best internal-variable rate seen and `residual` its Biot residual norm.
    #[error(
        "Newton iteration did not converge at step {step} after {iterations} iterations \
         (residual {residual:.3e} MPa)"
    )]
    NonConvergence {
        step: usize,
        iterations: usize,
        residual: f64,
        best: [f64; 6],
    },

    #[error("singular Newton Jacobian at step {step}")]
    SingularJacobian { step: usize },

    #[error("unsupported schema '{found}', expected '{expected}'")]
    Schema {
        found: String,
        expected: &'static str,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("all {0} restarts failed")]
    AllRestartsFailed(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NonConvergence { .. }
                | Error::SingularJacobian { .. }
                | Error::AllRestartsFailed(_)
        )
    }

    /// Attach a time-step index to solver errors.
    pub fn at_step(self, index: usize) -> Self {
        match self {
            Error::NonConvergence {
                iterations,
                residual,
                best,
                ..
            } => Error::NonConvergence {
                step: index,
                iterations,
                residual,
                best,
            },
            Error::SingularJacobian { .. } => Error::SingularJacobian { step: index },
            other => other,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

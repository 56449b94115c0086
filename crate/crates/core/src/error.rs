use thiserror::Error;

pub type Result<T> = std::result::Result<T, FpgError>;

#[derive(Debug, Error)]
pub enum FpgError {
    /// Malformed configuration or mismatched dimensions between inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A value handed to an operation is outside its domain.
    #[error("invalid input: {0}")]
    Input(String),

    #[error("empirical covariance at step {h} is singular; uncovered direction {direction:?}")]
    SingularCovariance { h: usize, direction: Vec<f64> },

    #[error("covariance at step {h} does not cover the target feature mean; uncovered direction {direction:?}")]
    UncoveredDirection { h: usize, direction: Vec<f64> },

    #[error("resolvent (I - gamma M) is singular: eigenvalue of gamma M closest to 1 is {eigenvalue}")]
    SingularResolvent { eigenvalue: f64 },

    #[error("exact gradient is the zero vector; relative metrics are undefined")]
    DegenerateTarget,

    #[error("behavior policy gives zero probability to observed action (episode {k}, step {h}, state {s}, action {a})")]
    ZeroBehaviorProbability { k: usize, h: usize, s: usize, a: usize },

    #[error("parameters diverged at iteration {iter} (norm {norm:.3e})")]
    Diverged { iter: usize, norm: f64 },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dataset validation failed: {0}")]
    Validation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl FpgError {
    /// Process exit code used by the CLI and the C ABI status mapping.
    pub fn exit_code(&self) -> i32 {
        match self {
            FpgError::SingularCovariance { .. }
            | FpgError::UncoveredDirection { .. }
            | FpgError::SingularResolvent { .. }
            | FpgError::Diverged { .. } => 3,
            FpgError::DegenerateTarget => 4,
            _ => 2,
        }
    }
}

pub(crate) fn config(msg: impl Into<String>) -> FpgError {
    FpgError::Config(msg.into())
}

pub(crate) fn input(msg: impl Into<String>) -> FpgError {
    FpgError::Input(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = EsrfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum EsrfError {
    /// Inconsistent run configuration (grid refinement, step sizes, sweep layout).
    #[error("configuration error: {0}")]
    Config(String),

    /// A structured config file failed to parse or validate.
    #[error("{path}:{line}: field `{field}`: {message}")]
    ConfigField {
        path: String,
        line: usize,
        field: String,
        message: String,
    },

    #[error("model validation error: {0}")]
    ModelValidation(String),

    #[error("degenerate ensemble: need at least 2 members, got {0}")]
    DegenerateEnsemble(usize),

    #[error("matrix is not positive semidefinite: smallest eigenvalue {min_eigenvalue:e} below -{floor:e}")]
    NotPsd { min_eigenvalue: f64, floor: f64 },

    #[error("matrix is not symmetric: relative defect {0:e}")]
    NotSymmetric(f64),

    #[error("matrix is not invertible: {0}")]
    NotInvertible(String),

    #[error("singular ensemble covariance ({0}); use the pseudo-inverse perturbation (reich-pinv)")]
    SingularCovariance(String),

    #[error("degenerate covariance at fine step {step}: {detail}")]
    DegenerateCovariance { step: usize, detail: String },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid post-multiplier: {0}")]
    InvalidPostMultiplier(String),

    #[error("divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("rate fit unavailable: {0}")]
    FitUnavailable(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl EsrfError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        EsrfError::Io {
            path: path.into(),
            source,
        }
    }
}

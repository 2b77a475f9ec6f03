use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error("kernel requires s>t (t={t}, s={s})")]
    TimeOrder { t: f64, s: f64 },

    #[error("matrix is not symmetric positive definite: {0}")]
    NotSpd(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("grid too small: {0}")]
    GridTooSmall(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("unknown builtin problem '{0}'")]
    UnknownBuiltin(String),

    #[error("stage '{stage}' failed: {message}")]
    Stage { stage: String, message: String },

    #[error("monte carlo: {0}")]
    MonteCarlo(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SolverError {
    pub fn stage(stage: impl Into<String>, message: impl Into<String>) -> Self {
        SolverError::Stage {
            stage: stage.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, SolverError>;

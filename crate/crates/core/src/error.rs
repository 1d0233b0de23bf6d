use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Rotation angle too close to pi for the logarithm to pick a unique axis.
    #[error("ambiguous rotation axis: angle {angle} rad is within 1e-6 of pi")]
    AmbiguousAxis { angle: f64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("ill-conditioned graph: {0}")]
    IllConditioned(String),

    #[error("degenerate registration: {0}")]
    DegenerateRegistration(String),

    #[error("unmatched scene: {0}")]
    UnmatchedScene(String),

    #[error("registration failed: {0}")]
    RegistrationFailed(String),

    #[error("insufficient overlap: {overlap} valid pixel pairs, {required} required")]
    InsufficientOverlap { overlap: usize, required: usize },

    #[error("{stage} stage failed: {error}")]
    Stage { stage: &'static str, error: Box<Error> },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// The underlying error with stage wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { error, .. } => error.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

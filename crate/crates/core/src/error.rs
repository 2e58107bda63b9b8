use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("cheirality violation: reprojected depth {depth:e} is not in front of the camera")]
    Cheirality { depth: f64 },

    #[error("indefinite system: {0}")]
    IndefiniteSystem(String),

    #[error("non-finite residual on {edge}")]
    Numeric { edge: String },

    #[error("solver not stationary: |J^T r|_inf = {gradient_norm:e} exceeds {threshold:e}")]
    NonStationary { gradient_norm: f64, threshold: f64 },

    #[error("schedule replay failed at iteration {iteration}: {reason}")]
    ScheduleReplay { iteration: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Stable machine-readable code, used as the CLI `error_code` prefix.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InsufficientData(_) => "insufficient_data",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::Cheirality { .. } => "cheirality",
            Error::IndefiniteSystem(_) => "indefinite_system",
            Error::Numeric { .. } => "numeric",
            Error::NonStationary { .. } => "non_stationary",
            Error::ScheduleReplay { .. } => "schedule_replay",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Config(_) => "config",
            Error::Context { source, .. } => source.code(),
        }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

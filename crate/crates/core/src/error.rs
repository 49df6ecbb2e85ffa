use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid pose: {0}")]
    InvalidPose(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("input is not centered (max row mean {0:e})")]
    NotCentered(f64),

    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("batch is empty")]
    EmptyBatch,

    #[error("invalid dictionary: {0}")]
    InvalidDictionary(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag for the error class, used in one-line diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidPose(_) => "InvalidPose",
            Error::DimensionMismatch(_) => "DimensionMismatch",
            Error::DegenerateGeometry(_) => "DegenerateGeometry",
            Error::SingularSystem(_) => "SingularSystem",
            Error::NotCentered(_) => "NotCentered",
            Error::EmptyTrainingSet => "EmptyTrainingSet",
            Error::EmptyBatch => "EmptyBatch",
            Error::InvalidDictionary(_) => "InvalidDictionary",
            Error::Parse { .. } => "ParseError",
            Error::SchemaMismatch(_) => "SchemaMismatch",
            Error::Config(_) => "ConfigError",
            Error::Io { .. } => "IoError",
        }
    }
}

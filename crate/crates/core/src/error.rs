use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("domain error in {op}: {details}")]
    Domain { op: &'static str, details: String },

    #[error("needle and prostate masks have an empty intersection")]
    EmptyRegion,

    #[error("phantom geometry degenerate after {attempts} attempts: {what}")]
    DegenerateGeometry { attempts: usize, what: String },

    #[error("{path}: {what} at offset {offset}")]
    BadFormat {
        path: PathBuf,
        offset: u64,
        what: String,
    },

    #[error("missing core file {path}")]
    MissingCoreFile { path: PathBuf },

    #[error("unknown core id {0}")]
    UnknownCore(u64),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("non-finite loss at epoch {epoch}, core {core_id}")]
    NonFiniteLoss { epoch: usize, core_id: u64 },

    #[error("metric needs both classes, {missing} cores are missing")]
    SingleClass { missing: &'static str },

    #[error("checkpoint config does not match: {0}")]
    ConfigMismatch(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

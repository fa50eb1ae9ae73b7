use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report.
///
/// [`Error::category`] gives the stable machine-readable tag printed by the
/// command-line tool (`ERROR <category>: ...`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed audio container {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported audio encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("audio payload is empty: {0}")]
    EmptySignal(PathBuf),

    #[error("patient {patient_id} appears in both the {first} and {second} splits")]
    Leakage {
        patient_id: String,
        first: String,
        second: String,
    },

    #[error("parse error at {location}: {reason}")]
    Parse { location: String, reason: String },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("size error: {0}")]
    Size(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error: {0}")]
    Rank(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error at {pointer}: {reason}")]
    Schema { pointer: String, reason: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint load failed: {0}")]
    Load(String),

    #[error("refusing to write into non-empty directory {0} (pass --force)")]
    DirectoryNotEmpty(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            Error::Format { .. } => "format",
            Error::UnsupportedEncoding { .. } => "unsupported-encoding",
            Error::EmptySignal(_) => "empty-signal",
            Error::Leakage { .. } => "leakage",
            Error::Parse { .. } => "parse",
            Error::InsufficientData(_) => "insufficient-data",
            Error::EmptySplit(_) => "empty-split",
            Error::Size(_) => "size",
            Error::Parameter(_) => "parameter",
            Error::Shape { .. } => "shape",
            Error::Rank(_) => "rank",
            Error::Config(_) => "config",
            Error::Schema { .. } => "schema",
            Error::Argument(_) => "argument",
            Error::NonFiniteLoss { .. } => "numeric",
            Error::Load(_) => "load",
            Error::DirectoryNotEmpty(_) => "refused",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 usage/config, 2 data, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Schema { .. }
            | Error::Argument(_)
            | Error::Parameter(_)
            | Error::DirectoryNotEmpty(_) => 1,
            Error::NonFiniteLoss { .. } => 3,
            _ => 2,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the binary file formats and checkpoint directories.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected \"BOFA\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("unexpected file kind {found} (expected {expected})")]
    Kind { expected: u8, found: u8 },
    #[error("unknown file kind {0}")]
    UnknownKind(u8),
    #[error("truncated payload: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("content hash mismatch for {0}")]
    HashMismatch(String),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("zero-norm input to {0}")]
    ZeroNorm(&'static str),
    #[error("eigen solver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty task")]
    EmptyTask,
    #[error("unknown label {0}")]
    UnknownLabel(u32),
    #[error("missing prototype for class {0}")]
    MissingPrototype(u32),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("format error in {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("task {task}: {source}")]
    Stage {
        task: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, source: FormatError) -> Self {
        Error::Format {
            path: path.into(),
            source,
        }
    }

    /// The innermost error, with any stage context stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 for format/IO problems, 3 for numeric failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Format { .. } | Error::Io { .. } => 2,
            Error::NonFinite(_)
            | Error::ZeroNorm(_)
            | Error::NoConvergence { .. }
            | Error::Diverged(_) => 3,
            _ => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("count mismatch: expected {expected}, found {found} ({what})")]
    CountMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid weights: {0}")]
    WeightError(String),

    #[error("track set is empty")]
    EmptyTracks,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("dataset has no frames")]
    EmptyDataset,

    #[error("canonical frame {frame} has no dynamic pixels")]
    NoDynamicPixels { frame: usize },

    #[error("densification would leave an empty field")]
    DegenerateField,

    #[error("non-finite loss at epoch {epoch}, frame {frame}, term `{term}`: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        frame: usize,
        term: String,
        detail: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{}: {message}", file.display())]
    Format {
        file: PathBuf,
        offset: Option<u64>,
        message: String,
    },

    #[error("{}: unsupported format version {found} (expected {expected})", file.display())]
    Version {
        file: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{}: missing manifest", dir.display())]
    MissingManifest { dir: PathBuf },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(file: impl Into<PathBuf>, offset: Option<u64>, message: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFiniteLoss { .. } => 3,
            Error::Format { .. }
            | Error::Version { .. }
            | Error::MissingManifest { .. }
            | Error::Io { .. } => 4,
            _ => 2,
        }
    }
}

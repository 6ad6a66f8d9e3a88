//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A contour cannot be processed (zero length, too few points, ...).
    #[error("degenerate contour: {0}")]
    DegenerateContour(String),

    /// Geometry in an input file is malformed; carries the contour index.
    #[error("malformed geometry at contour {index}: {reason}")]
    MalformedGeometry { index: usize, reason: String },

    /// A model structure violates its invariants.
    #[error("invalid structure: {0}")]
    InvalidStructure(String),

    /// Model parameters are inconsistent with the structure.
    #[error("invalid model: {0}")]
    InvalidModel(String),

    /// A latent assignment is inconsistent with the model structure.
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),

    /// A persisted file declares an unsupported schema version.
    #[error("unsupported schema version {found} (expected {expected}) in {path}")]
    SchemaVersion {
        found: u32,
        expected: u32,
        path: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("failed to parse {path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, source: impl std::error::Error + Send + Sync + 'static) -> Self {
        Error::Parse {
            path: path.into(),
            source: Box::new(source),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

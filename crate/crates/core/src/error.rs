//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid or inconsistent configuration, detected before any work runs.
    #[error("config error: {0}")]
    Config(String),

    /// A dataset file could not be read or decoded.
    #[error("ingestion error: {path}: {message}")]
    Ingestion { path: PathBuf, message: String },

    /// A labels file row violates the declared schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A class has too few samples for the requested fold count.
    #[error("stratification error: {0}")]
    Stratification(String),

    /// Tensor shapes do not line up with the model configuration.
    #[error("shape error: {0}")]
    Shape(String),

    /// Imported weights do not match the model; lists the offending tensors.
    #[error("weight import error: mismatched tensors: {0}")]
    WeightImport(String),

    /// Training produced a non-finite loss; carries per-term attribution.
    #[error("training diverged at epoch {epoch} (lr {lr}): ce={ce} cr={cr} sim={sim}")]
    Divergence {
        epoch: usize,
        lr: f64,
        ce: f64,
        cr: f64,
        sim: f64,
    },

    /// An evaluation contract was violated (e.g. unlabeled sample in a test set).
    #[error("evaluation contract violation: {0}")]
    Contract(String),

    /// Checkpoint container is corrupt or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
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

    /// Process exit code for the CLI: 1 config, 2 runtime/training, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Schema(_) | Error::Stratification(_) => 1,
            Error::Io { .. } | Error::Ingestion { .. } | Error::Checkpoint(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

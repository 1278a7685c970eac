use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two tensors disagree on an extent.
    #[error("dimension mismatch in {op} on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        actual: usize,
    },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("range error in {op}: {detail}")]
    Range { op: &'static str, detail: String },

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("optimizer error: {0}")]
    Optimizer(String),

    #[error("model is in {actual} mode, {expected} mode required")]
    Mode {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("training diverged at stage {stage} epoch {epoch} step {step}: loss is {loss}")]
    Divergence {
        stage: usize,
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("checkpoint format version {found} not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    /// Parameters whose shapes disagree between a checkpoint and a model.
    #[error("checkpoint incompatible with model: {}", .0.join("; "))]
    Incompatible(Vec<String>),

    #[error("parse error in {file} line {line}: {detail}")]
    Parse {
        file: String,
        line: usize,
        detail: String,
    },

    #[error("dataset in {0} is empty")]
    EmptyDataset(PathBuf),

    #[error("protocol error: query identities {0:?} have no gallery match")]
    Protocol(Vec<usize>),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("{path}: {source}")]
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

    pub(crate) fn dim(op: &'static str, axis: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected,
            actual,
        }
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by dataset handling, preprocessing, model training and
/// pipeline orchestration.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// On-disk bytes disagree with the declared layout (shape, header, ...).
    #[error("format error: {0}")]
    Format(String),

    /// Cross-reference or invariant violation in loaded data.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// Connectivity graph with no nonzero edge weight; callers substitute
    /// the documented uniform-centrality fallback.
    #[error("degenerate graph: all edge weights are zero")]
    DegenerateGraph,

    /// Pipeline-stage wrapper so failures name the stage they came from.
    #[error("stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }

    /// Process exit code: 2 for validation-class errors, 3 for runtime
    /// failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Stage { source, .. } => source.exit_code(),
            Error::Format(_)
            | Error::Validation(_)
            | Error::InvalidInput(_)
            | Error::Config(_) => 2,
            _ => 3,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        move |source| Error::Io {
            path: path.into(),
            source,
        }
    }
}

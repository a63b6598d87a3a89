use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. The variant doubles as the
/// machine-readable category printed by the command-line front end.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric error: {message}")]
    Numeric {
        message: String,
        /// Row of the batch (or step of a trajectory) that produced the value.
        index: Option<usize>,
        /// Last point known to evaluate finitely, when one exists.
        last_valid: Option<Vec<f64>>,
    },

    #[error("degenerate scale in channel {channel} ({name})")]
    DegenerateScale { channel: usize, name: String },

    #[error("training diverged at epoch {epoch}, step {step}: loss {loss}")]
    Divergence {
        epoch: usize,
        step: usize,
        loss: f64,
    },

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn numeric(message: impl Into<String>) -> Self {
        Error::Numeric {
            message: message.into(),
            index: None,
            last_valid: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short stable tag used in error output.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Numeric { .. } => "numeric",
            Error::DegenerateScale { .. } => "degenerate-scale",
            Error::Divergence { .. } => "training",
            Error::Geometry(_) => "geometry",
            Error::Parse { .. } => "parse",
            Error::Validation(_) => "validation",
            Error::Io { .. } => "io",
        }
    }

    /// Process exit code: 1 runtime, 3 validation (bad config, schema or
    /// file contents). Usage errors (2) are produced by the argument parser.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Validation(_)
            | Error::Parse { .. }
            | Error::DegenerateScale { .. } => 3,
            _ => 1,
        }
    }
}

//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not conform to the operation.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// `log` applied to an entry that is not a positive number.
    #[error("log of non-positive entry {value} at index {index}")]
    NonPositiveLog { value: f64, index: usize },

    /// `backward` called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    LossNotScalar { shape: Vec<usize> },

    /// Optimizer step requested before any backward pass populated gradients.
    #[error("optimizer step without populated gradients; call backward first")]
    MissingGrads,

    /// A precondition on an argument failed.
    #[error("{0}")]
    InvalidArgument(String),

    /// Cosine similarity of a zero vector is undefined.
    #[error("cosine similarity undefined for a zero vector (degenerate embedding)")]
    ZeroVector,

    /// Every query was excluded (no cross-camera matches in the gallery).
    #[error("no valid queries: every query lacks a cross-camera match in the gallery")]
    NoValidQueries,

    /// A binary file did not match the expected layout.
    #[error("{path}: {message} at byte offset {offset}")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Configuration file or flag error (CLI exit code 1).
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage failed; names the stage so sweeps can report it.
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Attach a pipeline stage name to an error.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// CLI exit code class: 1 for configuration errors, 2 for runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 2,
        }
    }
}

pub(crate) trait ResultExt<T> {
    fn stage(self, name: &'static str) -> Result<T>;
}

impl<T> ResultExt<T> for Result<T> {
    fn stage(self, name: &'static str) -> Result<T> {
        self.map_err(|e| e.in_stage(name))
    }
}

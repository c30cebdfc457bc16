use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("dtype mismatch in {op}: expected {expected}, got {got}")]
    DType {
        op: &'static str,
        expected: &'static str,
        got: &'static str,
    },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("layer `{layer}`: {detail}")]
    Layer { layer: String, detail: String },

    #[error("pruning structure error: {0}")]
    Structure(String),

    #[error("weight file version {found} unsupported (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("checksum failure: {0}")]
    Checksum(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("shape mismatch between manifest and {what}: {detail}")]
    ManifestShape { what: String, detail: String },

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("incompatible dataset for strategy: {0}")]
    Incompatible(String),

    /// Carries the inner error in its message rather than as a `source`, so
    /// error chains print it once.
    #[error("stage `{stage}` failed: {inner}")]
    Stage { stage: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            inner: Box::new(self),
        }
    }

    /// Innermost error, skipping stage wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { inner, .. } => inner.root(),
            other => other,
        }
    }
}

use std::path::PathBuf;

/// Errors produced anywhere in the training and inference stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("unknown style `{0}`")]
    UnknownStyle(String),

    /// Another caller is still loading the named style.
    #[error("style `{0}` is still loading")]
    Loading(String),

    #[error("training diverged in {stage} at step {step}: {detail}")]
    Divergence {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("image error in {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    /// Strips any `Stage` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }
}

/// Validates a scale parameter, which must lie in `[0, 1]`.
pub(crate) fn check_scale(l: f64) -> Result<()> {
    if (0.0..=1.0).contains(&l) {
        Ok(())
    } else {
        Err(Error::arg(format!("scale parameter {l} outside [0, 1]")))
    }
}

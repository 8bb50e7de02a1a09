use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("forward cache is stale (cache revision {cache}, network revision {net})")]
    StaleCache { cache: u64, net: u64 },

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("attribute `{0}` has a single class in the training data")]
    SingleClass(String),

    #[error("classifier for `{attribute}` reached {accuracy:.4} held-out accuracy, below the required {required:.4}")]
    AccuracyBelowThreshold {
        attribute: String,
        accuracy: f64,
        required: f64,
    },

    #[error("step {t} out of range 0..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("guidance hook returned a {rows}x{cols} matrix, expected {want_rows}x{want_cols}")]
    HookShape {
        rows: usize,
        cols: usize,
        want_rows: usize,
        want_cols: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

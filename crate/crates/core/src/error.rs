use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("non-finite value in {site} at frame {frame}")]
    NonFinite { site: String, frame: usize },

    #[error("non-finite gradient for variable `{0}`")]
    NanGradient(String),

    #[error("input too short: {len} samples, need at least {min}")]
    InputTooShort { len: usize, min: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("degenerate signal: {0}")]
    DegenerateSignal(String),

    #[error("degenerate reference: {0}")]
    DegenerateReference(String),

    #[error("degenerate scene: {0}")]
    DegenerateScene(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("variant mismatch: {0}")]
    VariantMismatch(String),

    #[error("loss is not deterministic: {first} vs {second}")]
    Determinism { first: f64, second: f64 },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("requested {requested} scenes for split `{split}` but only {available} distinct pairs exist (short by {})", requested - available)]
    Shortfall {
        split: String,
        requested: usize,
        available: usize,
    },

    #[error("training diverged at epoch {epoch}; last good checkpoint: {last_good:?}")]
    Diverged {
        epoch: usize,
        last_good: Option<PathBuf>,
    },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad or missing input data rather than
    /// numerical breakdown or misuse of the API.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Wav { .. }
                | Error::Json(_)
                | Error::Format { .. }
                | Error::Corpus(_)
                | Error::Shortfall { .. }
                | Error::InputTooShort { .. }
                | Error::DegenerateSignal(_)
                | Error::DegenerateReference(_)
                | Error::DegenerateScene(_)
                | Error::Geometry(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::NanGradient(_)
                | Error::Diverged { .. }
                | Error::Determinism { .. }
        )
    }
}

use std::path::PathBuf;

/// Errors produced by the semiformer library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration detected before any training step runs.
    #[error("configuration error: {0}")]
    Config(String),

    /// The requested labeled/unlabeled split cannot be produced.
    #[error("split error: {0}")]
    Split(String),

    /// A caller violated an operation's precondition (shape, normalization, emptiness).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A forward pass produced NaN or infinite activations.
    #[error("non-finite activation at layer `{layer}`")]
    NonFinite { layer: String },

    /// Training loss became non-finite; the run is aborted.
    #[error("non-finite loss at step {step} (L={total}, L_l={labeled}, L_u={unlabeled}, lr={lr})")]
    NonFiniteLoss {
        step: u64,
        total: f64,
        labeled: f64,
        unlabeled: f64,
        lr: f64,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

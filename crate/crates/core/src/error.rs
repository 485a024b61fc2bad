use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("instance budget exceeded: {count} boundaries given, at most {max} supported")]
    InstanceBudget { count: usize, max: usize },

    #[error("stroke width must be odd and >= 1, got {0}")]
    EvenWidth(u32),

    #[error("malformed record {record}: {reason}")]
    MalformedRecord { record: String, reason: String },

    #[error("unknown class token {token:?} (valid tokens: {valid})")]
    UnknownClassToken { token: String, valid: String },

    #[error("duplicate class annotation for {source_id} boundary {boundary}")]
    DuplicateAnnotation { source_id: String, boundary: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid split fractions {0:?}: must be non-negative and sum to 1")]
    InvalidFractions([f64; 3]),

    #[error("unknown architecture {0:?}")]
    UnknownArchitecture(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty boundary pixel list for descriptor extraction")]
    EmptyBoundary,

    #[error("descriptor extraction failed for boundary {index}: {source}")]
    Boundary {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged: non-finite loss in {phase} phase at epoch {epoch}")]
    Divergence { phase: String, epoch: usize },

    #[error("no descriptor/class pairs survived association ({detections} detections, threshold {threshold_px} px)")]
    EmptyAssociation { detections: usize, threshold_px: f64 },

    #[error("incompatible checkpoints: {0}")]
    Incompatible(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

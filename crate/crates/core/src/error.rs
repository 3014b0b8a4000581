use ndcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("ingestion error: {0}")]
    Ingestion(String),
    #[error("normalization error in column `{column}`: {detail}")]
    Normalization { column: String, detail: String },
    #[error("split error: {0}")]
    Split(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("metric undefined: {0}")]
    MetricUndefined(String),
    #[error("insufficient data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate test: {0}")]
    DegenerateTest(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("corruption error: {0}")]
    Corruption(String),
    #[error("robustness sweep error: {0}")]
    Sweep(String),
    #[error("attribution run `{subset}` failed: {detail}")]
    AttributedRun { subset: String, detail: String },
    #[error("stage `{stage}` failed for job `{job}`: {detail}")]
    Stage {
        stage: String,
        job: String,
        detail: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

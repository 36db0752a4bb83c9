use thiserror::Error;

#[derive(Debug, Error)]
pub enum VocError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate corpus: {0}")]
    DegenerateCorpus(String),
    #[error("unsupported dataset: {0}")]
    UnsupportedDataset(String),
    #[error("no trained distribution for conditioning latent {0}")]
    UnseenConditioning(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownStrategy {
        kind: &'static str,
        name: String,
        available: String,
    },
    #[error("file format error: {0}")]
    Format(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Tensor(#[from] voc_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, VocError>;

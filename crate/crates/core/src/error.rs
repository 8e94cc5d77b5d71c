use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid dependency parse: {0}")]
    InvalidParse(String),

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("malformed {}: record {record}: {message}", path.display())]
    Format {
        path: PathBuf,
        record: String,
        message: String,
    },

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn argument<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter for element {index}: {what}")]
    InvalidParameter { index: usize, what: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask is empty")]
    EmptyMask,

    #[error("degenerate region of interest after {attempts} attempts")]
    DegenerateRoi { attempts: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(index: usize, what: impl Into<String>) -> Self {
        Error::InvalidParameter {
            index,
            what: what.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, PccsError>;

#[derive(Debug, Error)]
pub enum PccsError {
    /// An argument violated an operation's precondition.
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A loss term became NaN or infinite; training must stop.
    #[error("non-finite value in loss component `{component}`")]
    NonFinite { component: &'static str },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(PccsError::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(PccsError::Shape(msg.into()))
}

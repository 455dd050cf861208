use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image dimensions do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A scalar parameter is outside its allowed range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// Model or run configuration is inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// NaN or Inf produced where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Gradient check exceeded its tolerance.
    #[error("gradient check failed: {0}")]
    CheckFailed(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("serialization error: {0}")]
    Serialization(String),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

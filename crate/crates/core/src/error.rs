use thiserror::Error;

pub type Result<T> = std::result::Result<T, PalError>;

#[derive(Debug, Error)]
pub enum PalError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("scene generation failed: {0}")]
    Generation(String),

    #[error("sample {0} has no annotation points")]
    NoPoints(u32),

    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { value: f64, step: usize },

    #[error("training pool is empty after easy-sample selection ({hard} hard samples); dataset too hard")]
    EmptyTrainingPool { hard: usize },

    #[error("scheduler audit failed at epoch {epoch}: {message}")]
    Audit { epoch: usize, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl PalError {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        PalError::Parameter(msg.into())
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("convolution output extent is not integral: {0}")]
    NonIntegralOutput(String),

    #[error("function output is not a scalar (shape {0:?})")]
    NonScalarOutput(Vec<usize>),

    #[error("relative bias needs an {window}x{window} token grid, got {tokens} tokens")]
    BiasGridMismatch { window: usize, tokens: usize },

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error("value outside the loss domain: {0}")]
    Domain(String),

    #[error("crop of {crop} does not fit in a {height}x{width} image")]
    CropTooLarge {
        crop: usize,
        height: usize,
        width: usize,
    },

    #[error("invalid synthetic data spec: {0}")]
    InvalidSpec(String),

    #[error("corrupt VTB1 file: {0}")]
    CorruptFile(String),

    #[error("unsupported VTB1 format version {0}")]
    VersionMismatch(u8),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("non-finite loss at step {step}: {value}")]
    NonFiniteLoss { step: usize, value: f64 },

    #[error("unknown variable id {0}")]
    UnknownVar(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}

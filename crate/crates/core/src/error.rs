use std::path::PathBuf;

/// Errors produced anywhere in the lab.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("clean-latent recovery undefined at t={t} (alpha_t = 0)")]
    UndefinedRecovery { t: f64 },

    #[error("checkpoint integrity error at byte offset {offset}: {reason}")]
    Integrity { offset: u64, reason: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

impl LabError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Self::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Self::Numerical(msg.into())
    }
}

impl LabError {
    /// Process exit status: 1 invalid configuration, 2 missing or unreadable inputs, 3 numerical abort.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Shape(_) | Self::Json(_) => 1,
            Self::MissingInput(_) | Self::Ingestion { .. } | Self::Integrity { .. } | Self::Io(_) | Self::Image(_) => 2,
            Self::Numerical(_) | Self::UndefinedRecovery { .. } | Self::Tensor(_) => 3,
        }
    }
}

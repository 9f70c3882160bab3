use std::path::PathBuf;

/// Errors produced by the segmentation library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{id}: {source}")]
    File {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("image codec error for {path}: {message}")]
    Codec { path: PathBuf, message: String },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{} already exists; pass --overwrite to replace it", .0.display())]
    Exists(PathBuf),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable code, used by the command-line front end.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Shape(_) => "E_SHAPE",
            Error::Parameter(_) => "E_PARAM",
            Error::Config(_) => "E_CONFIG",
            Error::File { .. } => "E_FILE",
            Error::Codec { .. } => "E_CODEC",
            Error::Integrity(_) => "E_INTEGRITY",
            Error::Version { .. } => "E_VERSION",
            Error::Exists(_) => "E_EXISTS",
            Error::NonFinite(_) => "E_NONFINITE",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("bitstream corruption: CRC mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Corruption { stored: u32, computed: u32 },

    #[error("truncated stream: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// CLI exit code for this error class: 2 config, 3 data/format, 4 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 4,
            _ => 3,
        }
    }
}

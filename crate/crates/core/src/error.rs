//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed reconstruction or image file. `offset` is the byte position
    /// at which parsing failed, when known.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    #[error("unsupported camera model {name} (id {model_id}); only PINHOLE and SIMPLE_PINHOLE are accepted")]
    UnsupportedCameraModel { model_id: i32, name: String },

    #[error("load error: {0}")]
    Load(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("enhancement failed: {0}")]
    Enhance(String),

    /// Every pixel masked, or no valid SSIM window: the requested value does
    /// not exist.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
}

impl Error {
    pub fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            offset,
            msg: msg.into(),
        }
    }

    /// True for failures of the computation itself rather than of its inputs.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::Enhance(_))
    }
}

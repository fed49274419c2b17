use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("patch placement out of bounds: {0}")]
    Placement(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("corrupted image: {0}")]
    CorruptImage(String),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unsupported bit depth: maxval {0}")]
    UnsupportedBitDepth(u32),

    #[error("unknown class id {0}")]
    UnknownClass(usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by the filesystem rather than by bad inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input too short: {0}")]
    Length(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("parameter out of range: {0}")]
    Range(String),
    #[error("incompatible inputs: {0}")]
    Incompatible(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("missing file: {0}")]
    Missing(PathBuf),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Schema(_) => 2,
            Error::Config(_) | Error::Range(_) => 3,
            Error::Shape(_) | Error::Incompatible(_) | Error::Length(_) => 4,
            Error::Missing(_) => 5,
            Error::Format { .. } | Error::Wav(_) | Error::Image(_) => 6,
            Error::Degenerate(_) => 7,
            Error::Divergence(_) => 8,
            Error::Io(_) => 9,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

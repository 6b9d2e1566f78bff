use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid depth range: min {min} mm must be below max {max} mm")]
    DepthRange { min: u16, max: u16 },

    #[error("pixel ({x}, {y}) = {rgb:?} is not on the depth hue wheel")]
    Decode { x: u32, y: u32, rgb: [u8; 3] },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest line {line}: {msg}")]
    Manifest { line: u64, msg: String },

    #[error("duplicate fragment id `{id}` on manifest line {line}")]
    DuplicateFragment { id: String, line: u64 },

    #[error("infeasible split: {0}")]
    Infeasible(String),

    #[error("training failed: {0}")]
    Training(String),

    #[error("feature extraction failed: {0}")]
    Extraction(String),

    #[error("weights file {path}: {msg}")]
    Weights { path: PathBuf, msg: String },

    #[error("config: {0}")]
    Config(String),

    #[error("missing prerequisite {path}: run `{command}` first")]
    Prerequisite { path: PathBuf, command: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("{0}")]
    Format(String),
}

impl Error {
    /// Stable, machine-parseable name for the error family.
    pub fn category(&self) -> &'static str {
        match self {
            Error::DepthRange { .. } => "range",
            Error::Decode { .. } => "decode",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "argument",
            Error::Manifest { .. } => "manifest",
            Error::DuplicateFragment { .. } => "duplicate-id",
            Error::Infeasible(_) => "infeasible",
            Error::Training(_) => "training",
            Error::Extraction(_) => "extraction",
            Error::Weights { .. } => "weights",
            Error::Config(_) => "config",
            Error::Prerequisite { .. } => "prerequisite",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Format(_) => "format",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {a} vs {b}")]
    ShapeMismatch {
        context: &'static str,
        a: String,
        b: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image dimensions {h}x{w} not divisible by {divisor}")]
    Indivisible { h: usize, w: usize, divisor: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, a: impl std::fmt::Debug, b: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch {
            context,
            a: format!("{a:?}"),
            b: format!("{b:?}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

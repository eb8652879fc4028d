use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset root {} does not exist", .0.display())]
    MissingRoot(PathBuf),

    #[error("cannot sample {way}-way episode: {reason}")]
    InsufficientData { way: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("parameter `{0}` missing from parameter state")]
    MissingParam(String),

    #[error("non-finite loss ({stage}): {value}")]
    NonFinite { stage: &'static str, value: f64 },

    #[error("empty mask: no foreground pixel above threshold")]
    EmptyMask,

    #[error("class {0} has no members")]
    EmptyClass(usize),

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("image {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

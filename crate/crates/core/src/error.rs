use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        got: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(
        "could not place instance {placed} of {requested} after {attempts} attempts \
         (radius {radius_px}px on {width}x{height} canvas)"
    )]
    Placement {
        requested: usize,
        placed: usize,
        attempts: usize,
        radius_px: f64,
        width: usize,
        height: usize,
    },

    #[error("multi-class synthesis gave up after {attempts} crop draws: {reason}")]
    CropExhausted { attempts: usize, reason: String },

    #[error("parse error in {file}: field `{field}` at offset {offset}: {message}")]
    Parse {
        file: String,
        field: String,
        offset: usize,
        message: String,
    },

    #[error("non-finite value during training at epoch {epoch}, scene {scene}: {detail}")]
    NonFinite {
        epoch: usize,
        scene: String,
        detail: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(
        file: impl Into<String>,
        field: impl Into<String>,
        offset: usize,
        message: impl Into<String>,
    ) -> Self {
        Error::Parse {
            file: file.into(),
            field: field.into(),
            offset,
            message: message.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to decode {path}: {message}")]
    Decode { path: PathBuf, message: String },

    #[error("{path}: 16-bit images are not supported, convert to 8-bit first")]
    UnsupportedBitDepth { path: PathBuf },

    #[error("invalid image: {0}")]
    InvalidImage(String),

    #[error("insufficient tissue: {found} tissue pixels, at least {required} required")]
    InsufficientTissue { found: usize, required: usize },

    #[error("degenerate stains: extreme stain vectors are {angle_deg:.3} degrees apart")]
    DegenerateStains { angle_deg: f64 },

    #[error("stain matrix is singular or ill-conditioned")]
    SingularMatrix,

    #[error("mask selects no pixels")]
    EmptyMask,

    #[error("dataset contains no usable images")]
    EmptyDataset,

    #[error("no invertible colour matrix after {attempts} draws")]
    DegenerateSample { attempts: usize },

    #[error("profile was fitted with {field} = {profile}, but the run uses {config}")]
    ConventionMismatch {
        field: &'static str,
        profile: String,
        config: String,
    },

    #[error("profile schema error in `{field}`: {message}")]
    Schema { field: String, message: String },

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for failures of the file system or codecs rather than of the data.
    pub fn is_io(&self) -> bool {
        matches!(
            self,
            Error::Io { .. } | Error::Decode { .. } | Error::UnsupportedBitDepth { .. }
        )
    }
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated file ({context})")]
    Truncated { path: PathBuf, context: String },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported model format version {found} (this build reads {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("corrupt model file: {0}")]
    Corrupt(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier, used in machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::Geometry(_) => "geometry",
            Error::Unsupported(_) => "unsupported",
            Error::Numeric(_) => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::BadMagic { .. } => "bad_magic",
            Error::Truncated { .. } => "truncated",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::Corrupt(_) => "corrupt",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;

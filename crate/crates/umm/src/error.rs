use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, UmmError>;

#[derive(Debug, Error)]
pub enum UmmError {
    #[error(transparent)]
    Core(#[from] umm_core::Error),
    #[error("cannot parse {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("missing input {0}")]
    MissingInput(PathBuf),
    #[error("{what} version {found} does not match the supported version {expected}")]
    VersionMismatch { what: &'static str, expected: u32, found: u32 },
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),
    #[error("{path} holds {got} values, expected {expected}")]
    RasterLengthMismatch { path: PathBuf, expected: usize, got: usize },
    #[error("invalid archive {path}: {message}")]
    InvalidArchive { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Usage(String),
}

impl UmmError {
    /// Stable name used in the machine-readable error line.
    pub fn kind(&self) -> &'static str {
        match self {
            UmmError::Core(_) => "CoreError",
            UmmError::ConfigParse { .. } => "ConfigParse",
            UmmError::MissingInput(_) => "MissingInput",
            UmmError::VersionMismatch { .. } => "VersionMismatch",
            UmmError::MissingManifest(_) => "MissingManifest",
            UmmError::RasterLengthMismatch { .. } => "RasterLengthMismatch",
            UmmError::InvalidArchive { .. } => "InvalidArchive",
            UmmError::Io { .. } => "Io",
            UmmError::Usage(_) => "Usage",
        }
    }

    /// `{"error": kind, "message": text}` on one line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> UmmError {
        let path = path.into();
        move |source| {
            if source.kind() == std::io::ErrorKind::NotFound {
                UmmError::MissingInput(path)
            } else {
                UmmError::Io { path, source }
            }
        }
    }
}

//! CLI error type with process exit codes per failure class:
//! 2 config, 3 data, 4 numeric, 5 I/O.

use prunefire_core::Error as CoreError;
use std::fmt;

#[derive(Debug)]
pub enum AppError {
    Config(String),
    Data(String),
    Numeric(String),
    Io(String),
    Internal(String),
}

impl AppError {
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Config(_) => 2,
            AppError::Data(_) => 3,
            AppError::Numeric(_) => 4,
            AppError::Io(_) => 5,
            AppError::Internal(_) => 1,
        }
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppError::Config(m) => write!(f, "config error: {}", m),
            AppError::Data(m) => write!(f, "data error: {}", m),
            AppError::Numeric(m) => write!(f, "numeric error: {}", m),
            AppError::Io(m) => write!(f, "io error: {}", m),
            AppError::Internal(m) => write!(f, "internal error: {}", m),
        }
    }
}

impl std::error::Error for AppError {}

impl From<CoreError> for AppError {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        match &e {
            TooFewFilters { .. } => AppError::Config(e.to_string()),
            ManifestRow { .. }
            | EmptyManifest
            | ImageDecode { .. }
            | ImageGeometry { .. }
            | UnsplittableClass { .. }
            | EmptySubset
            | TemplateCount { .. }
            | ImpostorWindow { .. }
            | EmptyScores { .. }
            | LabelOutOfRange { .. } => AppError::Data(e.to_string()),
            NonFinite { .. } | NanLoss { .. } | ZeroVector => AppError::Numeric(e.to_string()),
            CorruptHeader { .. } | ShapeTableMismatch { .. } | TruncatedPayload { .. } => {
                AppError::Io(e.to_string())
            }
            // hook messages are stringified AppErrors; recover their class
            Hook(m) if m.starts_with("data error") => AppError::Data(m.clone()),
            Hook(m) if m.starts_with("numeric error") => AppError::Numeric(m.clone()),
            Hook(m) if m.starts_with("io error") => AppError::Io(m.clone()),
            _ => AppError::Internal(e.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for AppError {
    fn from(e: serde_json::Error) -> Self {
        AppError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, AppError>;

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. The CLI maps these onto its
/// stable exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("cannot evaluate: no scored samples")]
    EmptyEvaluation,
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("value out of domain: {0}")]
    Domain(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("schema mismatch: expected {expected}, got {found}")]
    Schema { expected: String, found: String },
    #[error("search failed: {0}")]
    Search(String),
    #[error("synthetic spec rejected: {0}")]
    Spec(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("protocol error: {message}")]
    Protocol { message: String, payload: String },
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// 0 success, 1 data error, 2 backend error, 3 config error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Backend(_) | Error::Protocol { .. } => 2,
            Error::Config(_) | Error::Schema { .. } | Error::Template(_) | Error::Spec(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

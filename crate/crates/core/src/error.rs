use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("histogram has a single populated intensity; no threshold separates two classes")]
    DegenerateHistogram,

    #[error("signature of {sig_h}x{sig_w} does not fit in a {canvas_h}x{canvas_w} canvas")]
    DoesNotFit {
        sig_h: usize,
        sig_w: usize,
        canvas_h: usize,
        canvas_w: usize,
    },

    #[error("image contains no foreground pixels")]
    EmptyForeground,

    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("batch normalization in training mode needs at least 2 samples, got {0}")]
    InsufficientBatch(usize),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),

    #[error("SVM solver did not converge after {iterations} iterations (violation gap {gap:.3e})")]
    Convergence { iterations: usize, gap: f64 },

    #[error("split protocol violated: {0}")]
    Protocol(String),

    #[error("cannot parse {path}: {reason}")]
    Parse { path: PathBuf, reason: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("artifact {path} was produced by config {found:016x}, expected {expected:016x}")]
    ConfigMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{0}")]
    Empty(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported or undecodable image {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("empty input")]
    EmptyInput,

    #[error("value outside operator domain: {0}")]
    Domain(String),

    #[error("degenerate intensity range in channel {channel} (max == min)")]
    DegenerateRange { channel: usize },

    #[error("window side must be odd and >= 1, got {0}")]
    BadWindow(usize),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("depth map contains negative values")]
    NegativeDepth,

    #[error("scene kind {kind} requires a depth map ({entry})")]
    MissingDepth { kind: String, entry: String },

    #[error("atmospheric light set is empty")]
    EmptySet,

    #[error("zero-norm vector in cosine term")]
    ZeroVector,

    #[error("contrastive anchor degenerate at tap {tap}: degraded and truth features coincide")]
    DegenerateAnchor { tap: usize },

    #[error("input too small: {0}")]
    TooSmall(String),

    #[error("NIQE model file missing: {0}")]
    ModelMissing(PathBuf),

    #[error("unpaired image: {0}")]
    PairMismatch(String),

    #[error("checkpoint does not match configuration: {0}")]
    ConfigMismatch(String),

    #[error("spatial dims {height}x{width} must be divisible by 4")]
    IndivisibleSpatialDims { height: usize, width: usize },

    #[error("empty or unusable corpus: {0}")]
    EmptyCorpus(String),

    #[error("non-finite loss at step {step}: total={total}")]
    NonFiniteLoss { step: usize, total: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn parse(context: impl Into<String>, reason: impl ToString) -> Self {
        Error::Parse { context: context.into(), reason: reason.to_string() }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("backward requires a single-element loss, got {0} elements")]
    NotScalar(usize),
    #[error("batch of {0} is too small for batch-norm training (need at least 2)")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("no images found under {0}")]
    EmptyCorpus(PathBuf),
    #[error("unreadable image {path}: {reason}")]
    UnreadableImage { path: PathBuf, reason: String },
    #[error("class `{class}` has {have} images, needs more than {need}")]
    InsufficientClassSamples {
        class: String,
        have: usize,
        need: usize,
    },
    #[error("occlusion window at ({top}, {left}) size {size} does not fit a {h}x{w} image")]
    WindowOutOfBounds {
        top: usize,
        left: usize,
        size: usize,
        h: usize,
        w: usize,
    },
    #[error("io failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes, not a weight file")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    VersionUnsupported(u32),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("weights do not match model spec: {0}")]
    SpecMismatch(String),
    #[error("freeze prefix `{0}` matches no parameter")]
    UnknownPrefix(String),
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

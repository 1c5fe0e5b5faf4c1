use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error("image {height}x{width} is not divisible by patch size {patch}")]
    NotPatchAligned { height: usize, width: usize, patch: usize },
    #[error("feature extractor `{0}` is not available")]
    ExtractorUnavailable(String),
    #[error("empty layer index set")]
    EmptyGroup,
    #[error("layer index {index} out of range for {layers} layers")]
    LayerOutOfRange { index: usize, layers: usize },
    #[error("invalid group specification: {0}")]
    InvalidGroups(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),
    #[error("mask sampling exhausted after {0} attempts")]
    MaskBudgetExhausted(usize),
    #[error("donor anomaly mask is empty")]
    EmptyDonorMask,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("missing ground-truth mask for {}", .0.display())]
    MissingMask(PathBuf),
    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
    #[error("feature file: {0}")]
    Features(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| Error::Io { path: path.into(), source })
    }
}

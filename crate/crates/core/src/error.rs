use std::path::PathBuf;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid video clip: {0}")]
    InvalidClip(String),

    #[error("timestep {t} out of range [0, {max})")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("non-monotone timesteps: t={t}, t_prev={t_prev}")]
    NonMonotoneTimesteps { t: usize, t_prev: usize },

    #[error("adapter placement error: {0}")]
    Placement(String),

    #[error("layer {0} already carries an adapter of this kind")]
    DoubleAttach(String),

    #[error("conflicting adapter shapes at {0}")]
    MergeConflict(String),

    #[error("recaptioner timed out after {retries} retries")]
    ClientTimeout { retries: usize },

    #[error("recaptioner failure: {0}")]
    Client(String),

    #[error("recaption rejected: {0}")]
    RecaptionValidation(String),

    #[error("embedding provider failure: {0}")]
    Provider(String),

    #[error("provider mismatch: image space {image:?} vs text space {text:?}")]
    ProviderMismatch { image: String, text: String },

    #[error("no injector map for block {0}")]
    MissingBlock(usize),

    #[error("no verb found in {0:?}; pass an explicit verb index")]
    NoVerbFound(String),

    #[error("condition has no verb index")]
    MissingVerbIndex,

    #[error("condition is already enhanced")]
    AlreadyEnhanced,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("config error: {0}")]
    Config(String),

    #[error("dataset is empty")]
    DatasetEmpty,

    #[error("invalid dataset: {}", .0.join("; "))]
    InvalidDataset(Vec<String>),

    #[error("clips carry different motion labels: {0:?} and {1:?}")]
    MismatchedMotion(String, String),

    #[error("trajectory leaves the frame at frame {0}")]
    TrajectoryOutOfFrame(usize),

    #[error("no checkpoint for motion {0:?}")]
    MissingCheckpoint(String),

    #[error("archive {kind:?} has format version {found}, expected {expected}")]
    VersionMismatch { kind: String, found: u32, expected: u32 },

    #[error("archive error: {0}")]
    Archive(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error is a rejected input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::DimensionMismatch(_)
                | Error::Shape(_)
                | Error::InvalidClip(_)
                | Error::TimestepOutOfRange { .. }
                | Error::NonMonotoneTimesteps { .. }
                | Error::Placement(_)
                | Error::DoubleAttach(_)
                | Error::MergeConflict(_)
                | Error::RecaptionValidation(_)
                | Error::ProviderMismatch { .. }
                | Error::MissingBlock(_)
                | Error::NoVerbFound(_)
                | Error::MissingVerbIndex
                | Error::AlreadyEnhanced
                | Error::Empty(_)
                | Error::Config(_)
                | Error::DatasetEmpty
                | Error::InvalidDataset(_)
                | Error::MismatchedMotion(..)
                | Error::TrajectoryOutOfFrame(_)
                | Error::MissingCheckpoint(_)
                | Error::VersionMismatch { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

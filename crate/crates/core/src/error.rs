use std::path::PathBuf;

use crate::params::ParameterStore;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual:?}")]
    Shape {
        context: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("prediction is not a distribution: entries sum to {sum}")]
    NotNormalized { sum: f64 },

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("backward already ran on this recording")]
    BackwardTwice,

    #[error("non-finite gradient for `{name}`, optimizer step aborted")]
    NonFiniteGradient { name: String },

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Parameters as they were at the end of the last finite epoch.
        last_good: Option<Box<ParameterStore>>,
    },

    #[error("invalid cost table: {0}")]
    CostTable(String),

    #[error("bad magic: expected \"PTEE\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error("truncated payload: need {expected} bytes, file has {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("manifest/payload mismatch: {0}")]
    ManifestMismatch(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("dataset format error at byte offset {offset}: {message}")]
    DatasetFormat { offset: u64, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used by the command-line error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotNormalized { .. } => "not_normalized",
            Error::UnknownParameter(_) => "unknown_parameter",
            Error::BackwardTwice => "backward_twice",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::CostTable(_) => "cost_table",
            Error::BadMagic { .. } => "bad_magic",
            Error::UnsupportedVersion { .. } => "unsupported_version",
            Error::TruncatedPayload { .. } => "truncated_payload",
            Error::ManifestMismatch(_) => "manifest_mismatch",
            Error::Manifest(_) => "manifest",
            Error::DatasetFormat { .. } => "dataset_format",
            Error::Config(_) => "config",
            Error::Io { .. } => "io",
        }
    }
}

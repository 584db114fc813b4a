use std::path::PathBuf;

/// Errors produced anywhere in the selection toolkit.
///
/// Every variant maps to a stable machine-readable code (see [`Error::code`])
/// which the command-line front end prints as `ERROR <code>: <detail>`.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("no manifest.json in {0}")]
    MissingManifest(PathBuf),

    #[error("invalid manifest {path}: {reason}")]
    InvalidManifest { path: PathBuf, reason: String },

    #[error("corrupt binary {path}: {reason}")]
    CorruptBinary { path: PathBuf, reason: String },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-finite feature value at flat index {index}")]
    NonFiniteFeature { index: usize },

    #[error("non-finite cost entry at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },

    #[error("feature set {0} is empty")]
    EmptyFeatureSet(String),

    #[error("label set {0} is empty")]
    EmptyLabelSet(String),

    #[error("image is empty")]
    EmptyImage,

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("covariance is not positive definite; use a positive ridge")]
    SingularCovariance,

    #[error("kernel underflow in row/column {0}; enable log-domain iterations")]
    KernelUnderflow(usize),

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("duplicate task id {0}")]
    DuplicateTaskId(String),

    #[error("non-finite score for task {0}")]
    NonFiniteScore(String),

    #[error("rankings cover different task sets: {0}")]
    IdSetMismatch(String),

    #[error("k = {k} outside 1..={max}")]
    KOutOfRange { k: usize, max: usize },

    #[error("unknown task {0}")]
    UnknownTask(String),

    #[error("no source matches target modality {0}")]
    NoCompatibleSource(String),

    #[error("missing labels for {0}")]
    MissingLabels(String),

    #[error("missing features for {0}")]
    MissingFeatures(String),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("malformed csv {path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },
}

impl Error {
    /// Stable error code used in CLI diagnostics.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingManifest(_) => "MissingManifest",
            Error::InvalidManifest { .. } => "InvalidManifest",
            Error::CorruptBinary { .. } => "CorruptBinary",
            Error::IoFailure { .. } => "IoFailure",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NonFiniteFeature { .. } => "NonFiniteFeature",
            Error::NonFiniteCost { .. } => "NonFiniteCost",
            Error::EmptyFeatureSet(_) => "EmptyFeatureSet",
            Error::EmptyLabelSet(_) => "EmptyLabelSet",
            Error::EmptyImage => "EmptyImage",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::SingularCovariance => "SingularCovariance",
            Error::KernelUnderflow(_) => "KernelUnderflow",
            Error::InvalidParams(_) => "InvalidParams",
            Error::DuplicateTaskId(_) => "DuplicateTaskId",
            Error::NonFiniteScore(_) => "NonFiniteScore",
            Error::IdSetMismatch(_) => "IdSetMismatch",
            Error::KOutOfRange { .. } => "KOutOfRange",
            Error::UnknownTask(_) => "UnknownTask",
            Error::NoCompatibleSource(_) => "NoCompatibleSource",
            Error::MissingLabels(_) => "MissingLabels",
            Error::MissingFeatures(_) => "MissingFeatures",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::MalformedCsv { .. } => "MalformedCsv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

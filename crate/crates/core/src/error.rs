use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong across the engine, from tape plumbing to
/// spec files and dataset loading.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: String, detail: String },

    #[error("unknown operation kind `{0}`")]
    UnknownOp(String),

    #[error("backward root must be a scalar, got {numel} elements")]
    NonScalarRoot { numel: usize },

    #[error("backward called on an empty tape")]
    EmptyTape,

    #[error("backward called twice on the same tape; run a new forward pass first")]
    TapeConsumed,

    #[error("{what} has no gradient")]
    MissingGrad { what: String },

    #[error("layer `{layer}`: {reason}")]
    InvalidSpec { layer: String, reason: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{name} must be non-negative, got {value}")]
    NegativeStrength { name: &'static str, value: f64 },

    #[error("target size equals seed size ({size}); skip the size penalty by setting lambda to 0")]
    TargetEqualsSeedSize { size: f64 },

    #[error("unknown complexity metric `{0}` (expected `size` or `ops`)")]
    UnknownMetric(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Data(String),

    #[error("class {class} has only {count} samples; too few for a stratified split")]
    StratifiedSplit { class: usize, count: usize },

    #[error("failed to parse network spec: {0}")]
    SpecParse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

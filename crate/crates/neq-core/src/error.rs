use thiserror::Error;

/// Errors produced by the engine, the tracker, and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite value produced by `{context}`")]
    NonFinite { context: String },

    #[error("gate length mismatch for layer `{layer}`: expected {expected}, got {got}")]
    GateLength { layer: String, expected: usize, got: usize },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("invalid layer configuration: {0}")]
    InvalidLayer(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("unknown neuron: layer {layer}, index {index}")]
    UnknownNeuron { layer: String, index: usize },

    #[error("layer `{0}` is not tracked")]
    UntrackedLayer(String),

    #[error("signature mismatch: {0}")]
    SignatureMismatch(String),

    #[error("velocity undefined: {0}")]
    VelocityUndefined(String),

    #[error("insufficient history: need at least {need} values, got {got}")]
    InsufficientHistory { need: usize, got: usize },

    #[error("missing gradient for non-frozen neuron {index} in layer `{layer}`")]
    MissingGradient { layer: String, index: usize },

    #[error("config error: field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error on `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error("mask replay error: {0}")]
    MaskReplay(String),

    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch at layer {layer}: expected {expected}, got {got}")]
    DimensionMismatch {
        layer: usize,
        expected: usize,
        got: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid architecture: {0}")]
    Architecture(String),

    #[error("forward cache does not belong to this network state ({0})")]
    StaleCache(&'static str),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid hyperparameter: {0}")]
    InvalidParameter(String),

    #[error("operation is undefined for the null key")]
    NullKey,

    #[error("key length mismatch: {left} vs {right}")]
    KeyLength { left: usize, right: usize },

    #[error("malformed key string {0:?}")]
    KeyFormat(String),

    #[error("key sampling exhausted after {attempts} attempts")]
    KeySampling { attempts: usize },

    #[error("key batch invariant violated: {0}")]
    KeyBatch(String),

    #[error("invalid modulation site {index}: base has {layers} layers")]
    InvalidLayerIndex { index: usize, layers: usize },

    #[error("probe set is empty")]
    EmptyProbes,

    #[error("digit corpus {path:?} could not be read: {source}")]
    CorpusMissing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("digit corpus line {line}: {message}")]
    CorpusFormat { line: usize, message: String },

    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },

    #[error("parameter budget mismatch: target {target}, best achievable {achieved}")]
    Budget { target: usize, achieved: usize },

    #[error("objective library is not distinguishable: {0}")]
    Indistinguishable(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u16, expected: u16 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

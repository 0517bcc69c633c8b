use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at message {index}: {message}")]
    Parse { index: usize, message: String },

    #[error("structure error at message {index}: {message}")]
    Structure { index: usize, message: String },

    #[error("trace header: {0}")]
    TraceHeader(String),

    #[error("trace payload length mismatch: header implies {expected} bytes, got {actual}")]
    TraceLength { expected: usize, actual: usize },

    #[error("trace integrity: layer {layer} row {row} sums to {sum}")]
    TraceIntegrity { layer: usize, row: usize, sum: f64 },

    #[error("trace causality: layer {layer} row {row} has mass {value} at column {col}")]
    TraceCausality {
        layer: usize,
        row: usize,
        col: usize,
        value: f32,
    },

    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("kv cache has no entry for layer {0}")]
    MissingCacheLayer(usize),

    #[error("layer range {start}..{end} out of bounds for {layers} layers")]
    LayerRange {
        start: usize,
        end: usize,
        layers: usize,
    },

    #[error("decode requires a non-empty kv cache")]
    EmptyCache,

    #[error("segment rows absent from scores: {0}")]
    SegmentRows(String),

    #[error("negative mass {value} at index {index}")]
    NegativeMass { index: usize, value: f64 },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("need at least {need} layers, got {got}")]
    TooFewLayers { need: usize, got: usize },

    #[error("empty calibration corpus")]
    EmptyCorpus,

    #[error("invalid selection policy: {0}")]
    InvalidPolicy(String),

    #[error("device capacity exceeded: need {required} bytes, {available} available")]
    Capacity { required: u64, available: u64 },

    #[error("block {0} already stored")]
    DuplicateBlock(String),

    #[error("block {0} not found")]
    MissingBlock(String),

    #[error("block {0} was dropped")]
    DroppedBlock(String),

    #[error("block {0} is not device-resident")]
    NotResident(String),

    #[error("payload for {block} has {actual} elements, expected {expected}")]
    PayloadSize {
        block: String,
        expected: usize,
        actual: usize,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("max_decode_steps must be positive")]
    InvalidDecodeSteps,

    #[error("no input with at least two rounds")]
    NoMultiRoundInput,

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad user input as opposed to a broken
    /// internal invariant.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::Invariant(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

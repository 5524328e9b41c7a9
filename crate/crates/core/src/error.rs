//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by gate math, optimizers, the model, and the pipelines.
#[derive(Debug, Error)]
pub enum Error {
    /// The annealing schedule produced (or was handed) a non-positive epsilon.
    #[error("epsilon schedule violation: epsilon must be positive, got {0}")]
    NonPositiveEpsilon(f64),

    /// A soft-threshold was requested with a negative threshold.
    #[error("negative prox threshold: {0}")]
    NegativeThreshold(f64),

    /// Two buffers that must agree in length do not.
    #[error("length mismatch in {what}: {left} vs {right}")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    /// Tensor shapes do not chain.
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: String,
        got: String,
    },

    /// A categorical id fell outside its field's cardinality.
    #[error("id {id} out of range for field `{field}` (cardinality {cardinality}) at batch row {row}")]
    IdOutOfRange {
        field: String,
        id: usize,
        cardinality: usize,
        row: usize,
    },

    /// A configuration value violates its documented range.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// AUC is undefined when the evaluation stream holds a single class.
    #[error("AUC undefined: evaluation data contains a single class")]
    SingleClass,

    /// The training loss left the reals; the run is aborted with context.
    #[error("non-finite loss {loss} at step {step}; run aborted")]
    Diverged { step: u64, loss: f64 },

    /// A pipeline was started on an empty data stream.
    #[error("empty data stream: {0}")]
    EmptyData(&'static str),

    /// A text record could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Day ranges handed to the splitter overlap.
    #[error("overlapping day ranges: {0}")]
    OverlappingDays(String),

    /// Checkpoint or report file handling failed.
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A persisted artifact could not be decoded.
    #[error("corrupt artifact {path}: {message}")]
    CorruptArtifact { path: String, message: String },

    /// The mask handed to absorption disagrees with the gate state.
    #[error("mask/gates inconsistency at slot {slot}: mask bit {bit}, gate {gate}")]
    MaskMismatch { slot: usize, bit: bool, gate: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

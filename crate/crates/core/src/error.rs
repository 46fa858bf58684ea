//! Crate-wide error type.
//!
//! Every fallible operation returns [`Error`]; shape failures always name the
//! offending operation and both shapes so messages are actionable without a
//! debugger.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: expected shape {expected:?}, got {got:?}")]
    ShapeExpectation {
        op: &'static str,
        expected: String,
        got: Vec<usize>,
    },

    #[error("reshape: cannot view {from:?} ({from_len} elements) as {to:?} ({to_len} elements)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    LossNotScalar(Vec<usize>),

    #[error("gradient requested for a tensor that is not on the recorded computation path")]
    NotOnTape,

    #[error("attention adaptation requires K and V to be the same tensor")]
    KeyValueMismatch,

    #[error("class label {label} out of range for {way}-way episode")]
    LabelOutOfRange { label: usize, way: usize },

    #[error("unknown adaptation mode {0:?} (expected full, support_only, query_only, self_only, none, or nonparam)")]
    UnknownMode(String),

    #[error("unknown distance kind {0:?} (expected sq_euclidean or euclidean)")]
    UnknownDistance(String),

    #[error("{0}")]
    InvalidArgument(String),

    #[error("dataset has {available} usable classes, episode needs {requested}")]
    NotEnoughClasses { available: usize, requested: usize },

    #[error("class {class} has {available} items, episode needs {requested} (support + query)")]
    NotEnoughItems {
        class: u32,
        available: usize,
        requested: usize,
    },

    #[error("class-id spaces overlap between splits: {0:?} appear in more than one")]
    SplitsOverlap(Vec<u32>),

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: String,
        found: [u8; 4],
        expected: [u8; 4],
    },

    #[error("{path}: truncated file, needed {needed} more bytes at offset {offset}")]
    Truncated {
        path: String,
        offset: usize,
        needed: usize,
    },

    #[error("{path}: unsupported format version {0}", .version)]
    BadVersion { path: String, version: u32 },

    #[error("{path}: invalid header field {field}: {reason}")]
    BadHeader {
        path: String,
        field: &'static str,
        reason: String,
    },

    #[error("{path} line {line}, column {column}: non-numeric cell {cell:?}")]
    BadCsvCell {
        path: String,
        line: usize,
        column: usize,
        cell: String,
    },

    #[error("{path}: stores {stored} scalars, requested {requested}")]
    PrecisionMismatch {
        path: String,
        stored: &'static str,
        requested: &'static str,
    },

    #[error("checkpoint is malformed: {0}")]
    BadCheckpoint(String),

    #[error("training task {task}: loss is not finite ({value})")]
    NonFiniteLoss { task: usize, value: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

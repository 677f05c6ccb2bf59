use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: every dimension must be at least 1")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("ragged rows in matrix literal")]
    Ragged,
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("axis {axis} is invalid for shape {shape:?}")]
    InvalidAxis { axis: usize, shape: Vec<usize> },
    #[error("kernel {kernel:?} larger than padded input {input:?} (pad {pad})")]
    KernelTooLarge {
        kernel: Vec<usize>,
        input: Vec<usize>,
        pad: usize,
    },
    #[error("stride must be positive")]
    ZeroStride,
    #[error("{op}: length mismatch, expected {expected}, got {got}")]
    LengthMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: empty selection")]
    EmptySelection { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box: width {w}, height {h}")]
    Degenerate { w: f64, h: f64 },
    #[error("boxes use different coordinate systems")]
    MixedCoordinates,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchError {
    #[error("cost matrix entry ({query}, {target}) is not finite")]
    NonFinite { query: usize, target: usize },
    #[error("{targets} targets exceed {queries} queries")]
    TooManyTargets { targets: usize, queries: usize },
    #[error("invalid assignment: {0}")]
    InvalidAssignment(String),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed XML: {0}")]
    Xml(String),
    #[error("missing element <{0}>")]
    MissingElement(&'static str),
    #[error("invalid number {value:?} in <{field}>")]
    BadNumber { field: String, value: String },
    #[error("unknown category name {0:?}")]
    UnknownCategory(String),
    #[error("unknown class id {0}")]
    UnknownClassId(String),
    #[error("degenerate box ({x_min}, {y_min}, {x_max}, {y_max})")]
    DegenerateBox {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
    },
    #[error("box ({x_min}, {y_min}, {x_max}, {y_max}) outside image {width}x{height}")]
    OutOfBounds {
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        width: usize,
        height: usize,
    },
    #[error("frame {0} is labeled bleeding but has no bleed region")]
    MissingBleedRegion(String),
    #[error("line {line}: {msg}")]
    Yolo { line: usize, msg: String },
    #[error("category index {index} out of range for {n} classes")]
    OneHotRange { index: usize, n: usize },
    #[error("label {0} has no records")]
    EmptyLabel(&'static str),
    #[error("invalid split ratio {0}")]
    BadRatio(f64),
    #[error("PPM: {0}")]
    Ppm(String),
    #[error("PPM payload truncated: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("image has shape {0:?}, expected [3, H, W]")]
    ImageShape(Vec<usize>),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint corrupted: {0}")]
    Corrupt(String),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("model config mismatch: checkpoint has {found}, model has {expected}")]
    ConfigMismatch { found: String, expected: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Crate-wide error.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("non-finite loss on image {image_id}")]
    NonFiniteLoss { image_id: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("optimizer: parameter {0} has no gradient buffer")]
    MissingGradient(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Other(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

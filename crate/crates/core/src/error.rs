//! Error types shared across the engine.

use thiserror::Error;

/// Errors raised by tensor construction, op shape checks, and the tape.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },

    #[error("{op}: axis {axis} mismatch: {detail}")]
    AxisMismatch {
        op: &'static str,
        axis: usize,
        detail: String,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: shapes {lhs:?} and {rhs:?} are incompatible")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("backward root {root} is not on the tape ({len} nodes)")]
    RootNotOnTape { root: usize, len: usize },

    #[error("backward on non-scalar root of shape {shape:?} requires an explicit seed")]
    SeedRequired { shape: Vec<usize> },

    #[error("batch_norm: channel population of {count} in training mode (variance undefined)")]
    DegenerateBatch { count: usize },

    #[error("dropout probability {p} out of range [0, 1)")]
    DropoutProbability { p: f64 },
}

/// Errors from the binary tensor container and checkpoint files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: not a tensor container file")]
    BadMagic,

    #[error("unsupported format version {found} (supported: {supported})")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("file truncated: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },

    #[error("entry `{name}`: shape {found:?} does not match expected {expected:?}")]
    EntryShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("entry `{name}` missing from container")]
    MissingEntry { name: String },

    #[error("entry `{name}`: dtype {found} where {expected} expected")]
    DtypeMismatch {
        name: String,
        expected: &'static str,
        found: String,
    },

    #[error("malformed header: {0}")]
    Header(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Errors from ingestion, codecs, and the preprocessing pipeline.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("rle: odd token count ({0} tokens)")]
    RleOddTokens(usize),

    #[error("rle: token `{0}` is not a positive integer")]
    RleBadToken(String),

    #[error("rle: run start {start} length {length} exceeds mask of {numel} pixels")]
    RleOutOfRange {
        start: usize,
        length: usize,
        numel: usize,
    },

    #[error("rle: run starting at {start} overlaps or precedes the previous run (runs must be ascending and disjoint)")]
    RleOverlap { start: usize },

    #[error("scan {case}/{day}: mixed slice dimensions {a:?} vs {b:?}")]
    MixedSliceDims {
        case: String,
        day: u32,
        a: (usize, usize),
        b: (usize, usize),
    },

    #[error("scan {case}/{day}: duplicate slice index {index}")]
    DuplicateSlice { case: String, day: u32, index: usize },

    #[error("scan {case}/{day}: slice indices not contiguous after sorting (gap before {index})")]
    NonContiguousSlices { case: String, day: u32, index: usize },

    #[error("scan {case}/{day}: no slices")]
    EmptyScan { case: String, day: u32 },

    #[error("fold split needs at least {k} cases, got {cases}")]
    TooFewCases { k: usize, cases: usize },

    #[error("synthetic volume shape {shape:?} below minimum (16,16,16)")]
    DegenerateShape { shape: (usize, usize, usize) },

    #[error("manifest row {row}: {detail}")]
    BadManifestRow { row: usize, detail: String },

    #[error("unknown class name `{0}` (expected large_bowel, small_bowel, stomach)")]
    UnknownClass(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image file {path}: {detail}")]
    Image { path: String, detail: String },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Errors from evaluation metrics and the dice loss.
#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shapes differ: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("probabilities outside [0,1]: found {value} (apply sigmoid first)")]
    ProbabilityRange { value: f64 },

    #[error("score input {name}={value} outside [0,1]")]
    ScoreRange { name: &'static str, value: f64 },

    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Errors from the optimizer and training loop.
#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite gradient for parameter `{name}` at step {step}; aborting")]
    NonFiniteGradient { name: String, step: usize },

    #[error("loss became non-finite at step {step}; training diverged")]
    Diverged { step: usize },

    #[error("learning-rate schedule: step {step} out of range [0, {total})")]
    ScheduleStep { step: usize, total: usize },

    #[error("fold {fold} out of range for {k}-fold assignment")]
    BadFold { fold: usize, k: usize },

    #[error("training set for fold {fold} is empty")]
    EmptyTrainSet { fold: usize },

    #[error("ensemble checkpoints disagree on architecture: {detail}")]
    EnsembleConfigMismatch { detail: String },

    #[error("ensemble needs at least one checkpoint")]
    EmptyEnsemble,

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Metrics(#[from] MetricsError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors from model construction and checkpoint/config validation.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("input extent {extent} on axis {axis} is not divisible by {required} (stride product)")]
    Indivisible {
        axis: usize,
        extent: usize,
        required: usize,
    },

    #[error("weight `{name}`: shape {found:?} does not match config ({expected:?})")]
    WeightShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Errors from attribution methods.
#[derive(Debug, Error)]
pub enum XaiError {
    #[error("unknown layer `{0}` (no activation recorded under that name)")]
    UnknownLayer(String),

    #[error("pixel set is empty")]
    EmptyPixelSet,

    #[error("pixel sets overlap at voxel {0:?}")]
    OverlappingPixelSets((usize, usize, usize)),

    #[error("pixel index {index:?} outside output extents {extents:?}")]
    PixelOutOfRange {
        index: (usize, usize, usize),
        extents: (usize, usize, usize),
    },

    #[error("class {class} out of range ({classes} classes)")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("op `{0}` has no attribution rule (rescale undefined)")]
    UnsupportedOp(String),

    #[error("attribution requires an eval-mode model (stochastic forward rejected)")]
    TrainingMode,

    #[error("baseline shape {baseline:?} does not match input shape {input:?}")]
    BaselineShape {
        baseline: Vec<usize>,
        input: Vec<usize>,
    },

    #[error("slice index {index} out of range for axis of extent {extent}")]
    SliceOutOfRange { index: usize, extent: usize },

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

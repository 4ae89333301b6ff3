use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match {len} elements")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("adam: {0}")]
    Optimizer(String),
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint stores {found:?}, expected {expected:?}")]
    DType { expected: crate::scalar::DType, found: Option<crate::scalar::DType> },
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("missing section `{0}`")]
    MissingSection(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error("bad metadata: {0}")]
    Meta(String),
}

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("expected mono audio, found {0} channels")]
    Multichannel(u16),
    #[error("empty audio")]
    Empty,
    #[error("invalid waveform: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid speaker profile: {0}")]
    Profile(String),
    #[error("invalid synthesis config: {0}")]
    Config(String),
    #[error("cannot write corpus output at {path}: {source}")]
    Output { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("corpus manifest: {0}")]
    Manifest(String),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("segment too short: {samples} samples, receptive field is {receptive_field}")]
    SegmentTooShort { samples: usize, receptive_field: usize },
    #[error("insufficient negatives: {masked} masked frames, need at least {needed}")]
    InsufficientNegatives { masked: usize, needed: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dual-channel segments differ in length ({0} vs {1})")]
    DualLengthMismatch(usize, usize),
    #[error("degenerate labels: training set contains a single class")]
    DegenerateLabels,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Audio(#[from] AudioError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot split {sessions} sessions into {k} folds of {per_fold}")]
    Indivisible { sessions: usize, k: usize, per_fold: usize },
    #[error("empty prediction set")]
    Empty,
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("label value {0} outside {{0, 1}}")]
    BadLabel(u8),
    #[error("invalid experiment: {0}")]
    Spec(String),
    #[error("missing backbone checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("test session leaked into training: {0}")]
    Leakage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

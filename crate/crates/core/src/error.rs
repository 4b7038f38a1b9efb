use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate box with zero area")]
    DegenerateBox,
    #[error("feature map shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch([usize; 3], [usize; 3]),
    #[error("invalid BEV grid: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene parameters: {0}")]
    InvalidParams(String),
    #[error("scene infeasible: could not place {what} after {attempts} attempts")]
    Infeasible { what: &'static str, attempts: usize },
}

/// Dataset file read/write failure. Parse errors carry the byte offset at
/// which decoding stopped.
#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: {reason}")]
    Shape { layer: usize, reason: String },
    #[error("layer {layer}: non-finite value in {stage}")]
    NonFinite { layer: usize, stage: &'static str },
    #[error("backward called without a cached train-mode forward pass")]
    NoForwardCache,
    #[error("tensor data length {got} does not match shape {shape:?}")]
    BadTensor { shape: [usize; 4], got: usize },
    #[error("parameter file: {0}")]
    Format(String),
    #[error("parameter file version {found} not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("parameter file checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("truncated message: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unknown protocol version {0}")]
    UnknownVersion(u16),
    #[error("unknown dtype tag {0}")]
    UnknownDtype(u8),
    #[error("header checksum mismatch")]
    HeaderChecksum,
    #[error("payload checksum mismatch")]
    PayloadChecksum,
    #[error("bandwidth constraint violated: {shared} shared values >= {raw} raw values")]
    Bandwidth { shared: usize, raw: usize },
    #[error("invalid feature map: {0}")]
    InvalidMap(String),
    #[error("invalid channel model: {0}")]
    InvalidChannel(String),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid ground truth: {0}")]
    InvalidTarget(String),
    #[error("non-finite loss on sample {sample}")]
    NonFiniteLoss { sample: usize },
}

/// Failure of an experiment step. [`ExperimentError::is_config`] separates
/// bad input from runtime aborts.
#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{model} training diverged at epoch {epoch} on scene {scene_seed}: {reason}")]
    Diverged { model: String, epoch: usize, scene_seed: u64, reason: String },
}

impl ExperimentError {
    pub fn is_config(&self) -> bool {
        matches!(self, ExperimentError::Config(_) | ExperimentError::Mismatch(_))
    }
}

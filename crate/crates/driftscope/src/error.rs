use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("bad checkpoint file {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("checkpoint has no tensors")]
    NoTensors,
    #[error("tensor {name}: shape {shape:?} does not match data length {len}")]
    ShapeMismatch {
        name: String,
        shape: Vec<u64>,
        len: usize,
    },
    #[error("selector matched no tensors")]
    EmptySelection,
    #[error("anchor step {0} not present in checkpoint list")]
    AnchorMissing(u64),
    #[error("checkpoints disagree on tensor names or shapes (step {0})")]
    InconsistentCheckpoints(u64),
    #[error("need at least {need} checkpoints, got {got}")]
    TooFewCheckpoints { need: usize, got: usize },
    #[error("drift matrix is all zeros")]
    ZeroDrift,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("direction is not unit norm (|norm - 1| = {0:.3e})")]
    NotUnit(f64),
    #[error("window [{lo}, {hi}] out of range for the series")]
    WindowOutOfRange { lo: u64, hi: u64 },
    #[error("need at least {need} positive samples in the fit window, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(String),
    #[error("zero-norm update at step {0}")]
    ZeroUpdate(u64),
    #[error("zero gradient vector at sample {0}")]
    ZeroGradient(usize),
    #[error("zero displacement between peak and trough")]
    ZeroDisplacement,
    #[error("checkpoints at steps {0} and {1} are not spaced by the stated interval")]
    BadSpacing(u64, u64),
    #[error("Gram-Schmidt breakdown after {0} retries")]
    GramSchmidtBreakdown(usize),
    #[error("non-finite {what} at step {step}")]
    NonFinite { what: String, step: u64 },
    #[error("gap range [{lo}, {hi}] does not fit in sequence length {seq_len}")]
    GapRange { lo: usize, hi: usize, seq_len: usize },
    #[error("checkpoint incompatible with model config: {0}")]
    IncompatibleCheckpoint(String),
    #[error("bad direction file {path}: {reason}")]
    BadDirectionFile { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("run directory is locked (stale lock? remove {0} or pass --force)")]
    Locked(String),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

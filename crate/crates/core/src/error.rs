use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("degenerate input to {op}: {detail}")]
    Degenerate { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contrastive batch too small: {n} sample(s), need at least 2")]
    BatchTooSmall { n: usize },

    #[error("degenerate batch: no anchor has a positive")]
    DegenerateBatch,

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("length mismatch in {op}: {left} vs {right}")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("empty input to {op}")]
    EmptyInput { op: &'static str },

    #[error("need at least two classes, found one")]
    SingleClass,

    #[error("missing labels: {0}")]
    MissingLabels(String),

    #[error("task mismatch: {0}")]
    TaskMismatch(String),

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("file truncated {}", match .record { Some(i) => format!("in record {i}"), None => "in header".to_string() })]
    Truncated { record: Option<usize> },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("record count mismatch: header says {expected}, found {found}")]
    CountMismatch { expected: usize, found: usize },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint was written for a different model configuration")]
    FingerprintMismatch,

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("stage order violated: expected a {expected} checkpoint, got {found}")]
    StageOrder { expected: String, found: String },

    #[error("missing parameter {0}")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

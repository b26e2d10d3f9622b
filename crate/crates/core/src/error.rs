//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Template DSL.
    #[error("unbalanced brace in template: {0}")]
    UnbalancedBrace(String),
    #[error("unknown slot marker in template: {0}")]
    UnknownSlot(String),
    #[error("template has no [MASK] slot")]
    MissingMask,
    #[error("template has more than one [MASK] slot")]
    DuplicateMask,
    #[error("template has more than one [VDEMO] marker")]
    DuplicateVDemo,

    // Rendering.
    #[error("rendered plan has {length} tokens, exceeds max length {max}")]
    OverLength { length: usize, max: usize },
    #[error("example is missing required field {0}")]
    MissingField(String),
    #[error("label {0:?} is not in the task label set")]
    UnknownLabel(String),
    #[error("demonstration is labeled {got:?} but {expected:?} was requested")]
    DemoClassMismatch { expected: String, got: String },
    #[error("token plan has no mask position")]
    NoMaskPosition,

    // Data pipeline.
    #[error("failed to parse {context}: {detail}")]
    ParseError { context: String, detail: String },
    #[error("duplicate uid {0:?} in dataset")]
    DuplicateUid(String),
    #[error("class {label:?} has {have} examples but {need} are required")]
    InsufficientExamples {
        label: String,
        have: usize,
        need: usize,
    },
    #[error("class {0:?} has no examples to sample from")]
    EmptyClass(String),
    #[error("test set is empty")]
    EmptyTestSet,

    // Losses and training.
    #[error("vector norm below {0:e}; cosine similarity undefined")]
    DegenerateNorm(f64),
    #[error("training loss diverged (non-finite) at step {step}")]
    DivergedLoss { step: usize },
    #[error("seed {seed}: {source}")]
    SeedRun {
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    // Configuration and serialization.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    ///
    /// 2 = usage/config, 3 = data, 4 = training divergence, 1 = anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::InvalidConfig(_) => 2,
            Error::UnbalancedBrace(_)
            | Error::UnknownSlot(_)
            | Error::MissingMask
            | Error::DuplicateMask
            | Error::DuplicateVDemo
            | Error::ParseError { .. }
            | Error::DuplicateUid(_)
            | Error::UnknownLabel(_)
            | Error::InsufficientExamples { .. }
            | Error::EmptyClass(_)
            | Error::EmptyTestSet
            | Error::Io(_)
            | Error::Json(_) => 3,
            Error::DivergedLoss { .. } => 4,
            Error::SeedRun { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

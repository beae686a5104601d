//! Crate-wide error type.
//!
//! Hand-rolled rather than derived so the crate stays `no_std`-clean.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands have incompatible shapes; both are named so the
    /// message is actionable.
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A single operand has a shape the operation cannot accept.
    InvalidShape { op: &'static str, detail: String },
    /// A tensor tracked on one tape was fed to an operation running on
    /// another tape.
    TapeMismatch { op: &'static str },
    /// Gradient was requested through a tensor that is not tracked.
    NotTracked { op: &'static str },
    NotScalar { op: &'static str, shape: Vec<usize> },
    /// `Tape::backward` may run at most once per tape.
    BackwardConsumed,
    AllTargetsIgnored,
    TargetOutOfRange {
        row: usize,
        target: u32,
        classes: usize,
    },
    SequenceTooLong { len: usize, max: usize },
    PromptTooLong { len: usize, max: usize },
    EmptySequence,
    UnknownTask { task_id: u32 },
    InvalidConfig { detail: String },
    NonFinite { context: String },
    /// A training step produced a non-finite total loss; the per-term
    /// values are carried for diagnostics.
    NonFiniteLoss {
        stage: usize,
        step: usize,
        mlm: f64,
        agree: f64,
        disagree: f64,
        replay: f64,
    },
    EmptyCorpus,
    EmptyBuffer,
    EmptySplit { split: &'static str },
    LabelOutOfRange { label: u32, classes: usize },
    /// The synthetic vocabulary cannot supply enough fresh content
    /// tokens for a domain's slice.
    VocabExhausted {
        domain_id: u32,
        needed: usize,
        vocab: usize,
    },
    UnknownSimilarDomain { domain_id: u32, similar_to: u32 },
    DuplicateDomain { domain_id: u32 },
    SimilarityCycle { domain_id: u32 },
    MissingCell { row: usize, col: usize },
    UndefinedMetric {
        metric: &'static str,
        detail: String,
    },
    ArchitectureMismatch { detail: String },
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: shape mismatch between {lhs:?} and {rhs:?}")
            }
            Error::InvalidShape { op, detail } => write!(f, "{op}: invalid shape: {detail}"),
            Error::TapeMismatch { op } => {
                write!(f, "{op}: input tensor is tracked on a different tape")
            }
            Error::NotTracked { op } => write!(f, "{op}: tensor is not tracked on this tape"),
            Error::NotScalar { op, shape } => {
                write!(f, "{op}: expected a scalar tensor, got shape {shape:?}")
            }
            Error::BackwardConsumed => write!(f, "backward already ran on this tape"),
            Error::AllTargetsIgnored => {
                write!(f, "softmax_cross_entropy: every target row is ignored")
            }
            Error::TargetOutOfRange { row, target, classes } => write!(
                f,
                "softmax_cross_entropy: target {target} at row {row} out of range for {classes} classes"
            ),
            Error::SequenceTooLong { len, max } => {
                write!(f, "token sequence of length {len} exceeds maximum {max}")
            }
            Error::PromptTooLong { len, max } => {
                write!(f, "prompt of length {len} exceeds maximum {max}")
            }
            Error::EmptySequence => write!(f, "empty token sequence"),
            Error::UnknownTask { task_id } => write!(f, "no classification head for task {task_id}"),
            Error::InvalidConfig { detail } => write!(f, "invalid configuration: {detail}"),
            Error::NonFinite { context } => write!(f, "non-finite value in {context}"),
            Error::NonFiniteLoss { stage, step, mlm, agree, disagree, replay } => write!(
                f,
                "non-finite loss at stage {stage} step {step} \
                 (mlm={mlm}, agree={agree}, disagree={disagree}, replay={replay})"
            ),
            Error::EmptyCorpus => write!(f, "pre-training corpus is empty"),
            Error::EmptyBuffer => write!(f, "replay buffer is empty"),
            Error::EmptySplit { split } => write!(f, "task split '{split}' is empty"),
            Error::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            Error::VocabExhausted { domain_id, needed, vocab } => write!(
                f,
                "domain {domain_id}: vocabulary slice exhausted \
                 ({needed} content tokens needed, vocabulary holds {vocab})"
            ),
            Error::UnknownSimilarDomain { domain_id, similar_to } => write!(
                f,
                "domain {domain_id} declares similarity to unknown domain {similar_to}"
            ),
            Error::DuplicateDomain { domain_id } => {
                write!(f, "duplicate domain id {domain_id} in stream")
            }
            Error::SimilarityCycle { domain_id } => {
                write!(f, "similarity links around domain {domain_id} form a cycle")
            }
            Error::MissingCell { row, col } => {
                write!(f, "accuracy table cell ({row}, {col}) was never evaluated")
            }
            Error::UndefinedMetric { metric, detail } => {
                write!(f, "metric {metric} undefined: {detail}")
            }
            Error::ArchitectureMismatch { detail } => {
                write!(f, "architecture mismatch: {detail}")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes are incompatible.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A softmax row had no finite entry.
    DegenerateRow { row: usize },
    /// Every target position was ignored.
    EmptyBatch,
    EmptySequence,
    EmptyPrompt,
    Vocabulary { token: usize, vocab: usize },
    SequenceTooLong { len: usize, max: usize },
    /// Caller broke an API contract (e.g. grad-checking a frozen parameter).
    Contract(String),
    AlreadyAdapted,
    Config(String),
    /// A character that the tokenizer cannot represent.
    UnknownChar(char),
    NonFiniteGradient { step: usize, param: String },
    UnknownParameter(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            Error::DegenerateRow { row } => write!(f, "softmax row {row} is entirely -inf"),
            Error::EmptyBatch => write!(f, "every target position is ignored"),
            Error::EmptySequence => write!(f, "empty sequence"),
            Error::EmptyPrompt => write!(f, "empty prompt"),
            Error::Vocabulary { token, vocab } => {
                write!(f, "token {token} outside vocabulary of size {vocab}")
            }
            Error::SequenceTooLong { len, max } => {
                write!(f, "sequence of length {len} exceeds max_seq {max}")
            }
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::AlreadyAdapted => write!(f, "model already carries an adapter"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::UnknownChar(c) => write!(f, "character {c:?} is not in the vocabulary"),
            Error::NonFiniteGradient { step, param } => {
                write!(f, "non-finite gradient for {param} at step {step}")
            }
            Error::UnknownParameter(name) => write!(f, "unknown parameter {name}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.into(),
        rhs: rhs.into(),
    }
}

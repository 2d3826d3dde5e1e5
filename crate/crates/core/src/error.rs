use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised anywhere in the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("edit text is empty")]
    EmptyEdit,
    #[error("sequence of length {len} has no next-token target")]
    DegenerateEdit { len: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("divergence: {0}")]
    Divergence(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("schema violation: {0}")]
    Schema(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

use thiserror::Error;

/// Errors produced while building models, parsing domains or running inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// The factored MDP violates one of its structural invariants.
    #[error("model error: {0}")]
    Model(String),

    /// A value outside the domain of an operation (e.g. `t = 0` for a chain entry).
    #[error("domain error: {0}")]
    Domain(String),

    /// Syntax or semantic error in a domain document.
    #[error("{line}:{column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    /// Belief propagation hit an all-zero belief (contradictory evidence).
    #[error("inference error at node {node}: {message}")]
    Inference { node: String, message: String },

    /// An exact computation would exceed its configured size guard.
    #[error("size guard exceeded: {0}")]
    Guard(String),

    /// Unknown built-in domain or algorithm identifier.
    #[error("unknown identifier: {0}")]
    Unknown(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub(crate) fn parse(line: usize, column: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            column,
            message: msg.into(),
        }
    }
}

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} index {index} out of bounds (limit {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// A parameter became non-finite. Carries enough context to find the
    /// offending chain and iteration.
    #[error("chain {chain} diverged at iteration {iteration}: {detail}")]
    Divergence {
        chain: usize,
        iteration: u64,
        detail: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("round {round} failed (chain {chain}, block {block}): {message}")]
    Worker {
        round: u64,
        chain: usize,
        block: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }
}

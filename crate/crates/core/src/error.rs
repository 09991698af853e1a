//! Crate-wide error type.

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input violated a documented precondition (shape, range, state).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Vector/matrix dimensions do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A NaN or infinity appeared where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// `m = 1` and `n = 0`: the two-state chain has no unique stationary
    /// distribution.
    #[error("degenerate markov chain: m = 1 and n = 0")]
    DegenerateChain,

    /// Configuration file / key-value problem.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization or parsing problem.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training diverged (NaN loss or parameters).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    /// Process exit code for the CLI: 2 for configuration problems,
    /// 3 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Checkpoint(_) => 2,
            Error::Numerical(_) | Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}

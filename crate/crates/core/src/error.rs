use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("no solution: {0}")]
    NoSolution(String),
    #[error("division domain: {0}")]
    DivisionDomain(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
    #[error("unknown name `{name}`; valid names: {valid}")]
    UnknownName { name: String, valid: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

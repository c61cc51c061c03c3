//! Command errors and their process exit codes.

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("infeasible start: {0}")]
    InfeasibleStart(String),
    #[error("certification verdict is unstable: {0}")]
    Unstable(String),
    #[error(transparent)]
    Core(#[from] mismatch_mpc::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        use mismatch_mpc::Error as E;
        match self {
            Self::Config(_) => 2,
            Self::InfeasibleStart(_) => 3,
            Self::Unstable(_) => 4,
            Self::Core(E::InvalidInput(_) | E::UnknownName { .. }) => 2,
            Self::Core(E::InfeasibleStart(_)) => 3,
            Self::Core(_) | Self::Io { .. } | Self::Internal(_) => 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(CliError::InfeasibleStart("x".into()).exit_code(), 3);
        assert_eq!(CliError::Unstable("x".into()).exit_code(), 4);
        let unknown = mismatch_mpc::Error::UnknownName { name: "a".into(), valid: "b".into() };
        assert_eq!(CliError::from(unknown).exit_code(), 2);
        assert_eq!(CliError::from(mismatch_mpc::Error::InfeasibleStart("x".into())).exit_code(), 3);
        assert_eq!(CliError::from(mismatch_mpc::Error::NoSolution("x".into())).exit_code(), 1);
    }
}

use std::path::{Path, PathBuf};

use coto_core::trainer::CheckpointError;
use coto_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_ARCHITECTURE: i32 = 4;
pub const EXIT_FILE: i32 = 5;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration at {path}: {msg}")]
    Config { path: String, msg: String },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn file(path: &Path, source: std::io::Error) -> Self {
        CliError::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => EXIT_CONFIG,
            CliError::File { .. } => EXIT_FILE,
            CliError::Core(e) => match e {
                Error::Config(_) | Error::Contract(_) => EXIT_CONFIG,
                Error::Diverged { .. } => EXIT_DIVERGED,
                Error::Architecture(_) | Error::Dimension { .. } => EXIT_ARCHITECTURE,
                Error::Io { .. } | Error::Parse { .. } | Error::Checkpoint(_) => EXIT_FILE,
                _ => EXIT_OTHER,
            },
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Core(e.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_code_taxonomy() {
        let d = Error::Diverged {
            step: 3,
            reason: "loss".into(),
            diagnostic: None,
        };
        assert_eq!(CliError::from(d).exit_code(), EXIT_DIVERGED);
        assert_eq!(CliError::from(Error::Architecture("x".into())).exit_code(), EXIT_ARCHITECTURE);
        assert_eq!(CliError::from(CheckpointError::BadMagic).exit_code(), EXIT_FILE);
        let cfg = CliError::Config {
            path: "model.rank".into(),
            msg: "bad".into(),
        };
        assert_eq!(cfg.exit_code(), EXIT_CONFIG);
        assert!(cfg.to_string().contains("model.rank"));
    }
}

use std::path::{Path, PathBuf};

use thiserror::Error;

/// Problems with a run or campaign configuration. Exit code 2.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config field `{field}`: {message}")]
    Invalid { field: String, message: String },
    #[error("config parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: u64, message: String },
    #[error(transparent)]
    Core(#[from] sdc_forge_core::Error),
    #[error("corpus {0}")]
    Corpus(String),
    #[error("runs are not comparable: {0}")]
    Mismatch(String),
}

impl ForgeError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        ForgeError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: u64, message: impl Into<String>) -> Self {
        ForgeError::Parse {
            path: path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForgeError::Config(_) => 2,
            _ => 1,
        }
    }
}

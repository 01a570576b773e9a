use std::path::PathBuf;

use mosc_core::ErrorKind;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mosc_core::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            CliError::Core(e) => match e.kind() {
                ErrorKind::Validation => "validation",
                ErrorKind::Numerical => "numerical",
                ErrorKind::Io => "io",
            },
            CliError::Config(_) => "validation",
            CliError::Io { .. } => "io",
        }
    }

    /// 2 validation, 3 numerical failure, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self.kind_name() {
            "validation" => 2,
            "numerical" => 3,
            _ => 4,
        }
    }

    pub fn to_json(&self) -> String {
        let v = serde_json::json!({
            "error": {
                "kind": self.kind_name(),
                "exit_code": self.exit_code(),
                "message": self.to_string(),
            }
        });
        crate::output::canonical_json(&v)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

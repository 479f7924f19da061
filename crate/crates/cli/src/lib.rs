//! Experiment commands behind the `scalemix` binary.

pub mod commands;
pub mod config;

use std::path::Path;

use thiserror::Error;

pub use config::RunConfig;

/// Bundled synthetic dataset description.
pub const SYNTHETIC_SPEC: &str = include_str!("../../../configs/synthetic_spec.toml");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] scalemix::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Core(e) => e.category(),
        }
    }

    /// 1 usage/config/shape, 2 data/io/checkpoint, 3 numeric/resource.
    pub fn exit_code(&self) -> i32 {
        match self.category() {
            "usage" | "config" | "dimension" => 1,
            "data" | "io" | "checkpoint" => 2,
            _ => 3,
        }
    }

    /// Single-line diagnostic, `error[category]: message`.
    pub fn diagnostic(&self) -> String {
        format!(
            "error[{}]: {}",
            self.category(),
            self.to_string().replace('\n', " ")
        )
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

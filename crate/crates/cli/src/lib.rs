//! Stage commands of the sketch animation pipeline and their configuration.

pub mod config;
pub mod pipeline;

use std::path::PathBuf;

pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact(s): {}", list_paths(.0))]
    Missing(Vec<PathBuf>),

    #[error("output directory {} is in use (lockfile {} exists)", .0.display(), .0.join(pipeline::LOCK_NAME).display())]
    Locked(PathBuf),

    #[error(transparent)]
    Core(#[from] sketchanim_core::Error),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

fn list_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl CliError {
    /// Process exit status: 2 config, 3 missing artifact, 4 non-finite numbers.
    pub fn exit_code(&self) -> u8 {
        use sketchanim_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Missing(_) => 3,
            CliError::Core(E::NonFinite(_)) => 4,
            CliError::Core(E::Argument(_) | E::Shape(_) | E::UnknownPrompt(_)) => 2,
            _ => 1,
        }
    }
}

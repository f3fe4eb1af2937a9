//! Batch driver for the claimgraph pipeline: configuration, stage
//! orchestration, artifact layout and run manifests.

use std::path::{Path, PathBuf};

use claimgraph::ErrorCategory;

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::{Overrides, PipelineConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration is invalid:\n{}", .0.iter().map(|p| format!("  - {p}")).collect::<Vec<_>>().join("\n"))]
    Config(Vec<String>),

    #[error("missing {}: run `claimgraph {producer}` first", .path.display())]
    MissingArtifact { path: PathBuf, producer: String },

    #[error("{}: {source}", .path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error(transparent)]
    Core(#[from] claimgraph::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 2 for configuration, 3 for data and missing inputs, 4 for numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::Io { .. } => 3,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numerical => 4,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_category() {
        assert_eq!(CliError::Config(vec!["x".into()]).exit_code(), 2);
        let missing = CliError::MissingArtifact {
            path: "a".into(),
            producer: "train vgnn".into(),
        };
        assert_eq!(missing.exit_code(), 3);
        assert!(missing.to_string().contains("claimgraph train vgnn"));
        assert_eq!(CliError::Core(claimgraph::Error::UndefinedAuroc).exit_code(), 3);
        assert_eq!(CliError::Core(claimgraph::Error::Divergence { epoch: 2 }).exit_code(), 4);
        assert_eq!(CliError::Core(claimgraph::Error::Config("x".into())).exit_code(), 2);
    }
}

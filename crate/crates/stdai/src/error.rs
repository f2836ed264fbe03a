use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum StdaiError {
    #[error(transparent)]
    Core(#[from] stdai_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{} already exists; refusing to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("stage `{stage}` failed: {source}")]
    Stage { stage: &'static str, source: Box<StdaiError> },
}

pub type Result<T> = std::result::Result<T, StdaiError>;

impl StdaiError {
    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Self + '_ {
        move |source| StdaiError::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, detail: impl Into<String>) -> Self {
        StdaiError::Format { path: path.to_path_buf(), detail: detail.into() }
    }

    fn is_config(&self) -> bool {
        matches!(self, StdaiError::Config(_) | StdaiError::Core(stdai_core::Error::InvalidArgument(_)))
    }

    /// Process exit status: 2 for configuration problems, 3 for failures
    /// while running a stage.
    pub fn exit_code(&self) -> i32 {
        match self {
            StdaiError::Stage { source, .. } if source.is_config() => 2,
            e if e.is_config() => 2,
            _ => 3,
        }
    }
}

/// Tags errors with the stage that produced them.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<StdaiError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| match e.into() {
            s @ StdaiError::Stage { .. } => s,
            other => StdaiError::Stage { stage, source: Box::new(other) },
        })
    }
}

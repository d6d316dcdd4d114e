use std::path::PathBuf;

use crate::backend::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("allocation schemes cover different sub-tasks (missing from second: {missing:?}, extra in second: {extra:?})")]
    DomainMismatch { missing: Vec<usize>, extra: Vec<usize> },

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}could not parse a numbered sub-task list from the response", task_prefix(.task_id))]
    DecomposeParse { task_id: Option<String>, raw: String },

    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("probability {0} lies outside (0, 1]")]
    InvalidProbability(f64),

    #[error("embedding dimension mismatch: adapter expects {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("training diverged at epoch {epoch} (loss is not finite)")]
    Divergence { epoch: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("duplicate task id {0:?}")]
    DuplicateTask(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn task_prefix(task_id: &Option<String>) -> String {
    match task_id {
        Some(id) => format!("task {id}: "),
        None => String::new(),
    }
}

impl Error {
    /// Attach a task id to a decomposition parse error.
    pub fn for_task(self, id: &str) -> Self {
        match self {
            Error::DecomposeParse { raw, .. } => Error::DecomposeParse {
                task_id: Some(id.to_string()),
                raw,
            },
            other => other,
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, Error::Backend(_))
    }
}

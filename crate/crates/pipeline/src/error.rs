use crate::status::JobStatus;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("illegal transition {from:?} -> {to:?} for job {id}")]
    IllegalTransition { id: String, from: JobStatus, to: JobStatus },
    #[error("job {id} is {found:?}, expected {expected:?}")]
    StatusMismatch { id: String, expected: JobStatus, found: JobStatus },
    #[error("unknown job {0}")]
    UnknownJob(String),
    #[error("job {0} already exists")]
    DuplicateJob(String),
    #[error("unknown lease {0}")]
    UnknownLease(u64),
    #[error("lease {0} has expired")]
    ExpiredLease(u64),
    #[error("corrupt log {path}: {reason}")]
    CorruptLog { path: String, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("pipeline crashed (injected)")]
    Crashed,
    #[error(transparent)]
    Core(#[from] synthpose_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

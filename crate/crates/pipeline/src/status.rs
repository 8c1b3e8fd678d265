use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum JobStatus {
    Pending,
    Queued,
    Generated,
    Analysed,
    AnalysisFailed,
    Annotated,
    AnnotationFailed,
}

use JobStatus::*;

impl JobStatus {
    pub const ALL: [JobStatus; 7] = [Pending, Queued, Generated, Analysed, AnalysisFailed, Annotated, AnnotationFailed];

    pub fn is_failed(self) -> bool {
        matches!(self, AnalysisFailed | AnnotationFailed)
    }

    /// Whether `self -> to` is an edge of the job state machine.
    ///
    /// Generation errors go straight from `Queued` to `AnalysisFailed`, and
    /// failed jobs return to `Queued` when re-claimed.
    pub fn can_move_to(self, to: JobStatus) -> bool {
        matches!(
            (self, to),
            (Pending, Queued)
                | (Queued, Generated)
                | (Queued, AnalysisFailed)
                | (Generated, Analysed)
                | (Generated, AnalysisFailed)
                | (Analysed, Annotated)
                | (Analysed, AnnotationFailed)
                | (AnalysisFailed, Queued)
                | (AnnotationFailed, Queued)
        )
    }
}

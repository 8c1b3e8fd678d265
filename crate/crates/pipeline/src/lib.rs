//! Job orchestration for dataset production: a status database with a
//! replayable transition log, leased FIFO queues, and generator/annotator
//! worker pools.

pub mod clock;
pub mod db;
pub mod error;
pub mod queue;
pub mod run;
pub mod status;

pub use clock::{Clock, ManualClock, SystemClock};
pub use db::{replay_log, Database, JobRecord, Replay, Update};
pub use error::{PipelineError, Result};
pub use queue::{Delivery, Message, Queue};
pub use run::{run_pipeline, run_pipeline_with_clock, PipelineConfig, PipelineSummary};
pub use status::JobStatus;

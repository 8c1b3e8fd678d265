//! Job status database: an append-only transition log plus an optional snapshot.
//!
//! Log format, one JSON object per line:
//!
//! ```text
//! {"kind":"create","seq":1,"time_ms":..,"id":"seq_00000","seed":..}
//! {"kind":"transition","seq":2,"time_ms":..,"id":"seq_00000","from":"PENDING","to":"QUEUED",
//!  "attempt":1,"error":null,"retryable":true,"report":null,"artifact":null}
//! ```
//!
//! `seq` increases by one per line. The snapshot stores every record and the
//! last `seq` it covers; opening loads the snapshot and applies newer lines.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use synthpose_core::analyser::QualityReport;

use crate::clock::Clock;
use crate::error::{PipelineError, Result};
use crate::status::JobStatus;

pub const LOG_FILE: &str = "transitions.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const SNAPSHOT_FORMAT: &str = "synthpose.jobdb";
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub status: JobStatus,
    pub time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub sequence_id: String,
    pub seed: u64,
    pub status: JobStatus,
    /// Number of claims so far.
    pub attempts: u32,
    pub last_error: Option<String>,
    /// Whether a failed job may be claimed again.
    pub retryable: bool,
    pub quality: Option<QualityReport>,
    pub sequence_path: Option<String>,
    pub annotation_path: Option<String>,
    pub history: Vec<Stamp>,
}

impl JobRecord {
    fn new(id: &str, seed: u64, time_ms: u64) -> Self {
        Self {
            sequence_id: id.into(),
            seed,
            status: JobStatus::Pending,
            attempts: 0,
            last_error: None,
            retryable: true,
            quality: None,
            sequence_path: None,
            annotation_path: None,
            history: vec![Stamp { status: JobStatus::Pending, time_ms }],
        }
    }

    /// Done for good: annotated, or failed with no retry left.
    pub fn is_terminal(&self, max_attempts: u32) -> bool {
        match self.status {
            JobStatus::Annotated => true,
            s if s.is_failed() => !self.retryable || self.attempts >= max_attempts,
            _ => false,
        }
    }

    fn claimable(&self, max_attempts: u32) -> bool {
        self.status == JobStatus::Pending || (self.status.is_failed() && !self.is_terminal(max_attempts))
    }
}

/// Extra data recorded with a transition.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Update {
    pub error: Option<String>,
    /// Only meaningful for failures; defaults to retryable.
    pub non_retryable: bool,
    pub report: Option<QualityReport>,
    /// Artifact written by this step.
    pub artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogEntry {
    Create {
        seq: u64,
        time_ms: u64,
        id: String,
        seed: u64,
    },
    Transition {
        seq: u64,
        time_ms: u64,
        id: String,
        from: JobStatus,
        to: JobStatus,
        attempt: u32,
        error: Option<String>,
        retryable: bool,
        report: Option<QualityReport>,
        artifact: Option<String>,
    },
}

impl LogEntry {
    pub fn seq(&self) -> u64 {
        match self {
            LogEntry::Create { seq, .. } | LogEntry::Transition { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Snapshot {
    format: String,
    version: u32,
    last_seq: u64,
    max_attempts: u32,
    jobs: Vec<JobRecord>,
}

#[derive(Debug, Default)]
struct State {
    jobs: BTreeMap<String, JobRecord>,
    last_seq: u64,
}

impl State {
    // Applies one entry, checking it against the state machine.
    fn apply(&mut self, e: &LogEntry) -> Result<()> {
        match e {
            LogEntry::Create { id, seed, time_ms, .. } => {
                if self.jobs.contains_key(id) {
                    return Err(PipelineError::DuplicateJob(id.clone()));
                }
                self.jobs.insert(id.clone(), JobRecord::new(id, *seed, *time_ms));
            }
            LogEntry::Transition { id, from, to, attempt, error, retryable, report, artifact, time_ms, .. } => {
                let job = self.jobs.get_mut(id).ok_or_else(|| PipelineError::UnknownJob(id.clone()))?;
                if job.status != *from {
                    return Err(PipelineError::StatusMismatch { id: id.clone(), expected: *from, found: job.status });
                }
                if !from.can_move_to(*to) {
                    return Err(PipelineError::IllegalTransition { id: id.clone(), from: *from, to: *to });
                }
                job.status = *to;
                job.attempts = *attempt;
                job.retryable = *retryable;
                if error.is_some() || to.is_failed() {
                    job.last_error = error.clone();
                }
                if report.is_some() {
                    job.quality = report.clone();
                }
                match (to, artifact) {
                    (JobStatus::Generated | JobStatus::Analysed, Some(a)) => job.sequence_path = Some(a.clone()),
                    (JobStatus::Annotated, Some(a)) => job.annotation_path = Some(a.clone()),
                    _ => {}
                }
                if *to == JobStatus::AnalysisFailed {
                    job.sequence_path = None;
                }
                job.history.push(Stamp { status: *to, time_ms: *time_ms });
            }
        }
        self.last_seq = e.seq();
        Ok(())
    }
}

/// Thread-safe job database, file-backed or in memory.
pub struct Database {
    state: Mutex<State>,
    log: Option<Mutex<File>>,
    dir: Option<PathBuf>,
    clock: Arc<dyn Clock>,
    max_attempts: u32,
}

fn read_log(path: &Path) -> Result<Vec<LogEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<String> = reader.lines().collect::<std::io::Result<_>>()?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<LogEntry>(line) {
            Ok(e) => out.push(e),
            // A torn final line is what an interrupted append leaves behind.
            Err(_) if i + 1 == lines.len() => {
                log::warn!("{}: ignoring incomplete final line", path.display());
            }
            Err(err) => {
                return Err(PipelineError::CorruptLog { path: path.display().to_string(), reason: format!("line {}: {err}", i + 1) })
            }
        }
    }
    Ok(out)
}

/// Result of replaying a transition log from an empty database.
#[derive(Debug, Clone, PartialEq)]
pub struct Replay {
    pub entries: usize,
    pub jobs: BTreeMap<String, JobRecord>,
}

/// Replays every line of the log in `dir`, checking that each transition
/// starts from the job's current status and follows a legal edge.
pub fn replay_log(dir: &Path) -> Result<Replay> {
    let path = dir.join(LOG_FILE);
    let entries = read_log(&path)?;
    let mut state = State::default();
    for (i, e) in entries.iter().enumerate() {
        if e.seq() != i as u64 + 1 {
            return Err(PipelineError::CorruptLog { path: path.display().to_string(), reason: format!("gap at seq {}", e.seq()) });
        }
        state.apply(e)?;
    }
    Ok(Replay { entries: entries.len(), jobs: state.jobs })
}

impl Database {
    pub fn in_memory(clock: Arc<dyn Clock>, max_attempts: u32) -> Self {
        Self { state: Mutex::new(State::default()), log: None, dir: None, clock, max_attempts }
    }

    /// Opens or creates a database in `dir`.
    pub fn open(dir: &Path, clock: Arc<dyn Clock>, max_attempts: u32) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut state = State::default();
        let snap_path = dir.join(SNAPSHOT_FILE);
        if snap_path.exists() {
            let snap: Snapshot = serde_json::from_slice(&fs::read(&snap_path)?)?;
            if snap.format != SNAPSHOT_FORMAT {
                return Err(PipelineError::CorruptLog { path: snap_path.display().to_string(), reason: "wrong format".into() });
            }
            state.last_seq = snap.last_seq;
            state.jobs = snap.jobs.into_iter().map(|j| (j.sequence_id.clone(), j)).collect();
        }
        let log_path = dir.join(LOG_FILE);
        for e in read_log(&log_path)? {
            if e.seq() > state.last_seq {
                if e.seq() != state.last_seq + 1 {
                    return Err(PipelineError::CorruptLog {
                        path: log_path.display().to_string(),
                        reason: format!("gap before seq {}", e.seq()),
                    });
                }
                state.apply(&e)?;
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).read(true).open(&log_path)?;
        // Drop a torn final line so new entries start on a fresh line.
        let len = file.metadata()?.len();
        if len > 0 {
            let bytes = fs::read(&log_path)?;
            let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
            if keep as u64 != len {
                file.set_len(keep as u64)?;
            }
        }
        file.flush()?;
        Ok(Self { state: Mutex::new(state), log: Some(Mutex::new(file)), dir: Some(dir.to_path_buf()), clock, max_attempts })
    }

    pub fn max_attempts(&self) -> u32 {
        self.max_attempts
    }

    fn append(&self, state: &mut State, entry: LogEntry) -> Result<()> {
        // Validate on a scratch copy of the one affected job before persisting.
        let mut probe = State { jobs: BTreeMap::new(), last_seq: state.last_seq };
        let id = match &entry {
            LogEntry::Create { id, .. } | LogEntry::Transition { id, .. } => id.clone(),
        };
        if let Some(j) = state.jobs.get(&id) {
            probe.jobs.insert(id.clone(), j.clone());
        }
        probe.apply(&entry)?;
        if let Some(log) = &self.log {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            let mut f = log.lock();
            f.write_all(&line)?;
            f.flush()?;
        }
        state.apply(&entry)
    }

    /// Adds jobs in `PENDING`.
    pub fn create_jobs(&self, jobs: &[(String, u64)]) -> Result<()> {
        let mut st = self.state.lock();
        for (id, seed) in jobs {
            let entry = LogEntry::Create { seq: st.last_seq + 1, time_ms: self.clock.now_ms(), id: id.clone(), seed: *seed };
            self.append(&mut st, entry)?;
        }
        Ok(())
    }

    fn transition_locked(&self, st: &mut State, id: &str, expected: Option<JobStatus>, to: JobStatus, update: Update) -> Result<JobRecord> {
        let job = st.jobs.get(id).ok_or_else(|| PipelineError::UnknownJob(id.into()))?;
        let from = job.status;
        if let Some(exp) = expected {
            if exp != from {
                return Err(PipelineError::StatusMismatch { id: id.into(), expected: exp, found: from });
            }
        }
        if !from.can_move_to(to) {
            return Err(PipelineError::IllegalTransition { id: id.into(), from, to });
        }
        let attempt = if to == JobStatus::Queued { job.attempts + 1 } else { job.attempts };
        let last_time = job.history.last().map_or(0, |s| s.time_ms);
        let entry = LogEntry::Transition {
            seq: st.last_seq + 1,
            time_ms: self.clock.now_ms().max(last_time),
            id: id.into(),
            from,
            to,
            attempt,
            error: update.error,
            retryable: !(to.is_failed() && update.non_retryable),
            report: update.report,
            artifact: update.artifact,
        };
        self.append(st, entry)?;
        Ok(st.jobs[id].clone())
    }

    /// Moves `id` to `to` along a legal edge; the state is unchanged on error.
    pub fn update_status(&self, id: &str, to: JobStatus, update: Update) -> Result<JobRecord> {
        let mut st = self.state.lock();
        self.transition_locked(&mut st, id, None, to, update)
    }

    /// Like [`Database::update_status`], but only if the job is currently in `from`.
    pub fn transition(&self, id: &str, from: JobStatus, to: JobStatus, update: Update) -> Result<JobRecord> {
        let mut st = self.state.lock();
        self.transition_locked(&mut st, id, Some(from), to, update)
    }

    /// Atomically moves up to `n` claimable jobs to `QUEUED`, in id order.
    pub fn claim_pending(&self, n: usize) -> Result<Vec<JobRecord>> {
        let mut st = self.state.lock();
        let ids: Vec<String> = st
            .jobs
            .values()
            .filter(|j| j.claimable(self.max_attempts))
            .take(n)
            .map(|j| j.sequence_id.clone())
            .collect();
        ids.iter().map(|id| self.transition_locked(&mut st, id, None, JobStatus::Queued, Update::default())).collect()
    }

    pub fn get(&self, id: &str) -> Option<JobRecord> {
        self.state.lock().jobs.get(id).cloned()
    }

    pub fn records(&self) -> Vec<JobRecord> {
        self.state.lock().jobs.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.state.lock().jobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<JobStatus, usize> {
        let mut out = BTreeMap::new();
        for j in self.state.lock().jobs.values() {
            *out.entry(j.status).or_insert(0) += 1;
        }
        out
    }

    pub fn all_terminal(&self) -> bool {
        self.state.lock().jobs.values().all(|j| j.is_terminal(self.max_attempts))
    }

    /// Writes a snapshot of every record; the log is kept for replay.
    pub fn snapshot(&self) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let st = self.state.lock();
        let snap = Snapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: 1,
            last_seq: st.last_seq,
            max_attempts: self.max_attempts,
            jobs: st.jobs.values().cloned().collect(),
        };
        let mut bytes = serde_json::to_vec_pretty(&snap)?;
        bytes.push(b'\n');
        synthpose_core::io::write_atomic(&dir.join(SNAPSHOT_FILE), &bytes)?;
        Ok(())
    }
}

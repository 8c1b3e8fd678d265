//! End-to-end runner: a controller, generator workers and annotator workers.
//!
//! The controller claims jobs from the database and enqueues one generation
//! message per claim. A generator synthesizes the sequence, writes it under
//! `sequences/`, and runs the quality gate. Passing sequences move to
//! `ANALYSED` and get an annotation message. Rejected ones are deleted and
//! become `ANALYSIS_FAILED` with no retry. Annotators fit the sequence and
//! write `annotations/<id>.fit.json`.
//!
//! Messages carry the job's attempt number. A message whose job has moved on
//! or whose attempt is stale is acked and dropped, so redelivery is harmless.
//!
//! Output layout:
//!
//! ```text
//! <out>/db/transitions.jsonl   job transition log
//! <out>/db/snapshot.json       job records at the end of the run
//! <out>/queue/generate.jsonl   generation queue log
//! <out>/queue/annotate.jsonl   annotation queue log
//! <out>/sequences/<id>.seq.json
//! <out>/annotations/<id>.fit.json
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use synthpose_core::analyser::{quality_gate, Thresholds};
use synthpose_core::fit::{fit_sequence_data, FitConfig};
use synthpose_core::io::{self, AnnotationFile, ANNOTATION_SUFFIX, SEQUENCE_SUFFIX};
use synthpose_core::synth::{add_noise, generate_scenario, synthesize_sequence, Catalogs, ScenarioSpec, World};

use crate::clock::{Clock, SystemClock};
use crate::db::{Database, JobRecord, Update, DEFAULT_MAX_ATTEMPTS};
use crate::error::{PipelineError, Result};
use crate::queue::{Delivery, Queue};
use crate::status::JobStatus;

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub sequences: usize,
    pub gen_workers: usize,
    pub fit_workers: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub max_attempts: u32,
    pub lease_ms: u64,
    pub poll_ms: u64,
    pub thresholds: Thresholds,
    pub fit: FitConfig,
    /// Keypoint noise added after synthesis, metres.
    pub noise_sigma: f64,
    pub camera_profile: String,
    pub world: World,
    pub catalogs: Catalogs,
    /// Fraction of deliveries nacked after their work is done, for fault testing.
    pub nack_rate: f64,
    /// Stop every worker without acking once this many annotations have been
    /// recorded in this run, for crash testing.
    pub crash_after_annotations: Option<usize>,
}

impl PipelineConfig {
    pub fn new(sequences: usize, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            sequences,
            gen_workers: 1,
            fit_workers: 1,
            seed: 0,
            out_dir: out_dir.into(),
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            lease_ms: 600_000,
            poll_ms: 2,
            thresholds: Thresholds::default(),
            fit: FitConfig::default(),
            noise_sigma: 0.0,
            camera_profile: "default".into(),
            world: World::standard(),
            catalogs: Catalogs::standard(0),
            nack_rate: 0.0,
            crash_after_annotations: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.into()));
        if self.gen_workers == 0 || self.fit_workers == 0 {
            return bad("worker counts must be at least 1");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        if self.lease_ms == 0 {
            return bad("lease_ms must be positive");
        }
        if !(0.0..1.0).contains(&self.nack_rate) {
            return bad("nack_rate must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a nonnegative number");
        }
        self.thresholds.validate()?;
        self.fit.validate()?;
        self.catalogs.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub total: usize,
    pub counts: BTreeMap<JobStatus, usize>,
    pub all_terminal: bool,
    /// Fits started during this run.
    pub annotation_attempts: usize,
    /// Messages injected as nacks during this run.
    pub nacks: usize,
    /// Fit wall time averaged over annotated frames in this run, seconds.
    pub mean_fit_seconds_per_frame: Option<f64>,
}

impl PipelineSummary {
    pub fn count(&self, status: JobStatus) -> usize {
        self.counts.get(&status).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GenMessage {
    id: String,
    attempt: u32,
    spec: ScenarioSpec,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct FitMessage {
    id: String,
    attempt: u32,
}

pub fn job_id(i: usize) -> String {
    format!("seq_{i:05}")
}

/// Per-job seed, a splitmix64 step away from the master seed.
pub fn job_seed(master: u64, i: usize) -> u64 {
    let mut z = master.wrapping_add((i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the keypoint noise added to a sequence synthesized from `scenario_seed`.
pub fn noise_seed(scenario_seed: u64) -> u64 {
    scenario_seed ^ 0x6e_6f69_7365
}

pub fn sequence_path(out: &Path, id: &str) -> PathBuf {
    out.join("sequences").join(format!("{id}{SEQUENCE_SUFFIX}"))
}

pub fn annotation_path(out: &Path, id: &str) -> PathBuf {
    out.join("annotations").join(format!("{id}{ANNOTATION_SUFFIX}"))
}

pub fn db_dir(out: &Path) -> PathBuf {
    out.join("db")
}

struct Shared {
    cfg: PipelineConfig,
    db: Database,
    gen_q: Queue,
    fit_q: Queue,
    crashed: AtomicBool,
    done: AtomicBool,
    annotation_attempts: AtomicUsize,
    annotations: AtomicUsize,
    nacks: AtomicUsize,
    fit_time: parking_lot::Mutex<(f64, usize)>,
}

impl Shared {
    fn inject_nack(&self, d: &Delivery, queue: &str) -> bool {
        if self.cfg.nack_rate <= 0.0 {
            return false;
        }
        let mut h = DefaultHasher::new();
        (self.cfg.seed, queue, &d.message.payload, d.message.delivery_count).hash(&mut h);
        (h.finish() as f64 / u64::MAX as f64) < self.cfg.nack_rate
    }

    fn finish(&self, q: &Queue, d: &Delivery, queue: &str) -> Result<()> {
        if self.crashed.load(Ordering::SeqCst) {
            return Ok(());
        }
        if self.inject_nack(d, queue) {
            self.nacks.fetch_add(1, Ordering::Relaxed);
            return q.nack(d.lease);
        }
        match q.ack(d.lease) {
            // The message will be redelivered and dropped as stale.
            Err(PipelineError::ExpiredLease(l)) => {
                log::warn!("lease {l} expired before ack");
                Ok(())
            }
            other => other.map(|_| ()),
        }
    }

    // The job if the message still matches its state, otherwise `None`.
    fn current(&self, id: &str, attempt: u32, expected: JobStatus) -> Option<JobRecord> {
        self.db.get(id).filter(|j| j.status == expected && j.attempts == attempt)
    }
}

fn panic_text(p: Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "worker panicked".into())
}

fn generate(sh: &Shared, msg: &GenMessage) -> Result<()> {
    if sh.current(&msg.id, msg.attempt, JobStatus::Queued).is_none() {
        log::debug!("dropping stale generation message for {}", msg.id);
        return Ok(());
    }
    let out = &sh.cfg.out_dir;
    let path = sequence_path(out, &msg.id);
    let work = catch_unwind(AssertUnwindSafe(|| -> synthpose_core::Result<_> {
        let seq = synthesize_sequence(&msg.spec, &sh.cfg.world, &sh.cfg.catalogs)?;
        let seq = add_noise(&seq, sh.cfg.noise_sigma, noise_seed(msg.spec.seed))?;
        io::save_sequence(&path, &seq)?;
        Ok(seq)
    }));
    let seq = match work {
        Ok(Ok(seq)) => seq,
        failure => {
            let error = match failure {
                Ok(Err(e)) => e.to_string(),
                Err(p) => panic_text(p),
                Ok(Ok(_)) => unreachable!(),
            };
            let _ = std::fs::remove_file(&path);
            sh.db.transition(&msg.id, JobStatus::Queued, JobStatus::AnalysisFailed, Update { error: Some(error), ..Update::default() })?;
            return Ok(());
        }
    };
    let rel = path.strip_prefix(out).unwrap_or(&path).display().to_string();
    sh.db.transition(&msg.id, JobStatus::Queued, JobStatus::Generated, Update { artifact: Some(rel.clone()), ..Update::default() })?;
    if sh.crashed.load(Ordering::SeqCst) {
        return Ok(());
    }
    let report = match catch_unwind(AssertUnwindSafe(|| quality_gate(&seq, &sh.cfg.thresholds))) {
        Ok(Ok(r)) => r,
        failure => {
            let error = match failure {
                Ok(Err(e)) => e.to_string(),
                Err(p) => panic_text(p),
                Ok(Ok(_)) => unreachable!(),
            };
            std::fs::remove_file(&path)?;
            sh.db.transition(&msg.id, JobStatus::Generated, JobStatus::AnalysisFailed, Update { error: Some(error), ..Update::default() })?;
            return Ok(());
        }
    };
    if report.pass {
        sh.db.transition(
            &msg.id,
            JobStatus::Generated,
            JobStatus::Analysed,
            Update { report: Some(report), artifact: Some(rel), ..Update::default() },
        )?;
        sh.fit_q.enqueue(serde_json::to_string(&FitMessage { id: msg.id.clone(), attempt: msg.attempt })?)?;
    } else {
        // Rejected data is not kept.
        std::fs::remove_file(&path)?;
        let reasons: Vec<String> = report.reasons.iter().map(|r| format!("{r:?}")).collect();
        sh.db.transition(
            &msg.id,
            JobStatus::Generated,
            JobStatus::AnalysisFailed,
            Update {
                error: Some(format!("rejected: {}", reasons.join(", "))),
                non_retryable: true,
                report: Some(report),
                artifact: None,
            },
        )?;
    }
    Ok(())
}

fn annotate(sh: &Shared, msg: &FitMessage) -> Result<()> {
    if sh.current(&msg.id, msg.attempt, JobStatus::Analysed).is_none() {
        log::debug!("dropping stale annotation message for {}", msg.id);
        return Ok(());
    }
    sh.annotation_attempts.fetch_add(1, Ordering::SeqCst);
    let out = &sh.cfg.out_dir;
    let path = annotation_path(out, &msg.id);
    let tree = &sh.cfg.world.tree;
    let work = catch_unwind(AssertUnwindSafe(|| -> synthpose_core::Result<_> {
        let seq = io::load_sequence(&sequence_path(out, &msg.id))?;
        let fit = fit_sequence_data(&seq, tree, &sh.cfg.fit)?;
        io::save_annotation(&path, &AnnotationFile::new(&seq, &fit, tree, &sh.cfg.fit))?;
        Ok(fit)
    }));
    match work {
        Ok(Ok(fit)) => {
            {
                let mut t = sh.fit_time.lock();
                t.0 += fit.wall_time_per_frame * fit.frames() as f64;
                t.1 += fit.frames();
            }
            let rel = path.strip_prefix(out).unwrap_or(&path).display().to_string();
            sh.db.transition(&msg.id, JobStatus::Analysed, JobStatus::Annotated, Update { artifact: Some(rel), ..Update::default() })?;
            let n = sh.annotations.fetch_add(1, Ordering::SeqCst) + 1;
            if sh.cfg.crash_after_annotations.is_some_and(|k| n >= k) {
                sh.crashed.store(true, Ordering::SeqCst);
            }
        }
        failure => {
            let error = match failure {
                Ok(Err(e)) => e.to_string(),
                Err(p) => panic_text(p),
                Ok(Ok(_)) => unreachable!(),
            };
            sh.db.transition(&msg.id, JobStatus::Analysed, JobStatus::AnnotationFailed, Update { error: Some(error), ..Update::default() })?;
        }
    }
    Ok(())
}

fn worker<M, F>(sh: &Shared, q: &Queue, name: &str, handle: F) -> Result<()>
where
    M: serde::de::DeserializeOwned,
    F: Fn(&Shared, &M) -> Result<()>,
{
    loop {
        if sh.crashed.load(Ordering::SeqCst) {
            return Ok(());
        }
        let Some(d) = q.dequeue(sh.cfg.lease_ms)? else {
            if sh.done.load(Ordering::SeqCst) {
                return Ok(());
            }
            thread::sleep(Duration::from_millis(sh.cfg.poll_ms));
            continue;
        };
        match serde_json::from_str::<M>(&d.message.payload) {
            Ok(m) => handle(sh, &m)?,
            Err(e) => log::error!("{name}: dropping malformed message {}: {e}", d.message.seq),
        }
        sh.finish(q, &d, name)?;
    }
}

// Brings files left by an interrupted run back to a consistent state.
fn reconcile(sh: &Shared) -> Result<()> {
    let mut gen_pending = BTreeSet::new();
    for p in sh.gen_q.unacked_payloads() {
        if let Ok(m) = serde_json::from_str::<GenMessage>(&p) {
            gen_pending.insert((m.id, m.attempt));
        }
    }
    let mut fit_pending = BTreeSet::new();
    for p in sh.fit_q.unacked_payloads() {
        if let Ok(m) = serde_json::from_str::<FitMessage>(&p) {
            fit_pending.insert((m.id, m.attempt));
        }
    }
    for job in sh.db.records() {
        let key = (job.sequence_id.clone(), job.attempts);
        match job.status {
            JobStatus::Generated => {
                // Interrupted between writing the sequence and the quality gate.
                let _ = std::fs::remove_file(sequence_path(&sh.cfg.out_dir, &job.sequence_id));
                sh.db.transition(
                    &job.sequence_id,
                    JobStatus::Generated,
                    JobStatus::AnalysisFailed,
                    Update { error: Some("interrupted".into()), ..Update::default() },
                )?;
            }
            JobStatus::Queued if !gen_pending.contains(&key) => {
                enqueue_generation(sh, &job)?;
            }
            JobStatus::Analysed if !fit_pending.contains(&key) => {
                sh.fit_q.enqueue(serde_json::to_string(&FitMessage { id: job.sequence_id.clone(), attempt: job.attempts })?)?;
            }
            _ => {}
        }
    }
    Ok(())
}

fn enqueue_generation(sh: &Shared, job: &JobRecord) -> Result<()> {
    let spec = generate_scenario(&job.sequence_id, job.seed, &sh.cfg.catalogs, &sh.cfg.camera_profile)?;
    let msg = GenMessage { id: job.sequence_id.clone(), attempt: job.attempts, spec };
    sh.gen_q.enqueue(serde_json::to_string(&msg)?)?;
    Ok(())
}

fn controller(sh: &Shared) -> Result<()> {
    let batch = (sh.cfg.gen_workers * 2).max(1);
    loop {
        if sh.crashed.load(Ordering::SeqCst) {
            return Ok(());
        }
        if sh.db.all_terminal() {
            return Ok(());
        }
        // Claim only as much as the generators can take, so retries interleave.
        if sh.gen_q.len() < batch {
            for job in sh.db.claim_pending(batch)? {
                enqueue_generation(sh, &job)?;
            }
        }
        thread::sleep(Duration::from_millis(sh.cfg.poll_ms));
    }
}

/// Runs (or resumes) a pipeline in `cfg.out_dir` until every job is terminal.
///
/// Returns [`PipelineError::Crashed`] when crash injection fires; calling
/// again with the same directory resumes from the persisted logs.
pub fn run_pipeline(cfg: PipelineConfig) -> Result<PipelineSummary> {
    run_pipeline_with_clock(cfg, Arc::new(SystemClock::default()))
}

pub fn run_pipeline_with_clock(cfg: PipelineConfig, clock: Arc<dyn Clock>) -> Result<PipelineSummary> {
    cfg.validate()?;
    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(out.join("sequences"))?;
    std::fs::create_dir_all(out.join("annotations"))?;
    let db = Database::open(&db_dir(&out), clock.clone(), cfg.max_attempts)?;
    let gen_q = Queue::open(&out.join("queue").join("generate.jsonl"), clock.clone())?;
    let fit_q = Queue::open(&out.join("queue").join("annotate.jsonl"), clock)?;

    let existing: BTreeSet<String> = db.records().into_iter().map(|j| j.sequence_id).collect();
    let new_jobs: Vec<(String, u64)> =
        (0..cfg.sequences).map(|i| (job_id(i), job_seed(cfg.seed, i))).filter(|(id, _)| !existing.contains(id)).collect();
    db.create_jobs(&new_jobs)?;

    let sh = Shared {
        cfg,
        db,
        gen_q,
        fit_q,
        crashed: AtomicBool::new(false),
        done: AtomicBool::new(false),
        annotation_attempts: AtomicUsize::new(0),
        annotations: AtomicUsize::new(0),
        nacks: AtomicUsize::new(0),
        fit_time: parking_lot::Mutex::new((0.0, 0)),
    };
    reconcile(&sh)?;

    let results: Vec<Result<()>> = thread::scope(|s| {
        let sh = &sh;
        let mut handles = Vec::new();
        for _ in 0..sh.cfg.gen_workers {
            handles.push(s.spawn(move || worker::<GenMessage, _>(sh, &sh.gen_q, "generate", generate)));
        }
        for _ in 0..sh.cfg.fit_workers {
            handles.push(s.spawn(move || worker::<FitMessage, _>(sh, &sh.fit_q, "annotate", annotate)));
        }
        let ctl = controller(sh);
        sh.done.store(true, Ordering::SeqCst);
        if ctl.is_err() {
            sh.crashed.store(true, Ordering::SeqCst);
        }
        let mut all = vec![ctl];
        for h in handles {
            all.push(h.join().unwrap_or_else(|p| Err(PipelineError::Config(panic_text(p)))));
        }
        all
    });
    for r in results {
        r?;
    }
    if sh.crashed.load(Ordering::SeqCst) {
        return Err(PipelineError::Crashed);
    }
    sh.db.snapshot()?;
    let (secs, frames) = *sh.fit_time.lock();
    Ok(PipelineSummary {
        total: sh.db.len(),
        counts: sh.db.counts(),
        all_terminal: sh.db.all_terminal(),
        annotation_attempts: sh.annotation_attempts.load(Ordering::SeqCst),
        nacks: sh.nacks.load(Ordering::SeqCst),
        mean_fit_seconds_per_frame: (frames > 0).then(|| secs / frames as f64),
    })
}

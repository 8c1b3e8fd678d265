use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use synthpose_pipeline::db::LOG_FILE;
use synthpose_pipeline::run::db_dir;
use synthpose_pipeline::{replay_log, run_pipeline, JobStatus, ManualClock, PipelineConfig, PipelineError, Queue, SystemClock};

#[test]
fn fifo_over_a_thousand_messages() {
    let q = Queue::in_memory(Arc::new(ManualClock::new(0)));
    for i in 0..1000 {
        q.enqueue(i.to_string()).unwrap();
    }
    let mut order = Vec::new();
    while let Some(d) = q.dequeue(1000).unwrap() {
        order.push(q.ack(d.lease).unwrap().payload.parse::<usize>().unwrap());
    }
    assert_eq!(order, (0..1000).collect::<Vec<_>>());
}

#[test]
fn concurrent_consumers_ack_each_message_once() {
    let q = Arc::new(Queue::in_memory(Arc::new(SystemClock::default())));
    for i in 0..1000 {
        q.enqueue(i.to_string()).unwrap();
    }
    let acked = Arc::new(Mutex::new(Vec::new()));
    let handles: Vec<_> = (0..4)
        .map(|w| {
            let (q, acked) = (q.clone(), acked.clone());
            std::thread::spawn(move || {
                let mut rng = ChaCha8Rng::seed_from_u64(w);
                let mut nacks = 0;
                while let Some(d) = q.dequeue(60_000).unwrap() {
                    if rng.random_bool(0.1) {
                        q.nack(d.lease).unwrap();
                        nacks += 1;
                    } else {
                        let m = q.ack(d.lease).unwrap();
                        acked.lock().push((w, m.seq));
                    }
                }
                nacks
            })
        })
        .collect();
    let nacks: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert!(nacks > 0);
    let acked = acked.lock();
    assert_eq!(acked.len(), 1000);
    let distinct: BTreeSet<u64> = acked.iter().map(|(_, s)| *s).collect();
    assert_eq!(distinct, (1..=1000).collect());
    assert_eq!(q.len() + q.in_flight(), 0);
}

fn annotated_per_job(dir: &Path) -> BTreeMap<String, usize> {
    let log = fs::read_to_string(db_dir(dir).join(LOG_FILE)).unwrap();
    let mut out = BTreeMap::new();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["to"] == "ANNOTATED" {
            *out.entry(v["id"].as_str().unwrap().to_string()).or_insert(0) += 1;
        }
    }
    out
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["sequences", "annotations"] {
        for e in fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            out.insert(format!("{sub}/{}", p.file_name().unwrap().to_str().unwrap()), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn small_run_annotates_everything() {
    let dir = tempfile::tempdir().unwrap();
    let summary = run_pipeline(PipelineConfig::new(10, dir.path())).unwrap();
    assert!(summary.all_terminal);
    assert_eq!(summary.count(JobStatus::Annotated), 10, "{summary:?}");
    assert_eq!(files(dir.path()).len(), 20);
    let replay = replay_log(&db_dir(dir.path())).unwrap();
    assert!(replay.jobs.values().all(|j| j.status == JobStatus::Annotated));
}

#[test]
fn impossible_thresholds_reject_everything() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(6, dir.path());
    cfg.thresholds.min_mean_speed = f64::INFINITY;
    cfg.gen_workers = 2;
    let summary = run_pipeline(cfg).unwrap();
    assert_eq!(summary.count(JobStatus::AnalysisFailed), 6);
    assert_eq!(summary.annotation_attempts, 0);
    assert!(summary.all_terminal);
    // Rejected data is deleted.
    assert!(files(dir.path()).is_empty());
    let replay = replay_log(&db_dir(dir.path())).unwrap();
    for j in replay.jobs.values() {
        assert_eq!(j.attempts, 1);
        assert!(!j.retryable);
        assert!(j.quality.as_ref().is_some_and(|q| !q.pass));
    }
}

#[test]
fn crash_and_restart_lose_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(8, dir.path());
    cfg.gen_workers = 2;
    cfg.fit_workers = 2;
    cfg.nack_rate = 0.1;
    cfg.crash_after_annotations = Some(3);
    assert!(matches!(run_pipeline(cfg.clone()), Err(PipelineError::Crashed)));
    let mid = replay_log(&db_dir(dir.path())).unwrap();
    assert_eq!(mid.jobs.len(), 8);
    assert!(mid.jobs.values().filter(|j| j.status == JobStatus::Annotated).count() >= 3);

    cfg.crash_after_annotations = None;
    let summary = run_pipeline(cfg).unwrap();
    assert!(summary.all_terminal);
    assert_eq!(summary.counts.values().sum::<usize>(), 8);
    assert_eq!(summary.count(JobStatus::Annotated), 8, "{summary:?}");
    let replay = replay_log(&db_dir(dir.path())).unwrap();
    assert!(replay.jobs.values().all(|j| j.status == JobStatus::Annotated));
    let per_job = annotated_per_job(dir.path());
    assert_eq!(per_job.len(), 8);
    assert!(per_job.values().all(|n| *n == 1));
}

#[test]
fn worker_count_does_not_change_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(12, a.path());
    cfg.seed = 7;
    cfg.fit.max_iterations_joint = 20;
    let one = run_pipeline(cfg.clone()).unwrap();
    cfg.out_dir = b.path().to_path_buf();
    cfg.gen_workers = 4;
    cfg.fit_workers = 4;
    cfg.nack_rate = 0.1;
    let four = run_pipeline(cfg).unwrap();
    assert_eq!(one.counts, four.counts);
    assert_eq!(one.counts.values().sum::<usize>(), 12);
    let terminal = |d: &Path| -> BTreeMap<String, JobStatus> {
        replay_log(&db_dir(d)).unwrap().jobs.into_iter().map(|(k, j)| (k, j.status)).collect()
    };
    assert_eq!(terminal(a.path()), terminal(b.path()));
    assert!(files(a.path()) == files(b.path()), "artifacts differ between worker counts");
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::new(1, dir.path());
    cfg.fit_workers = 0;
    assert!(matches!(run_pipeline(cfg), Err(PipelineError::Config(_))));
}

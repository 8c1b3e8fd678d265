//! On-disk formats for sequences and annotations.
//!
//! Every file is a JSON object whose first two fields are `format` and
//! `version`. Writes go through a temporary file in the same directory and
//! a rename, so readers never observe a partial file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::body::{KinematicTree, PoseParams, ShapeParams, Translation};
use crate::error::{Error, Result};
use crate::fit::{FitConfig, FitResult};
use crate::synth::SequenceData;
use crate::Vec3;

pub const SEQUENCE_FORMAT: &str = "synthpose.sequence";
pub const ANNOTATION_FORMAT: &str = "synthpose.annotation";
pub const FORMAT_VERSION: u32 = 1;

pub const SEQUENCE_SUFFIX: &str = ".seq.json";
pub const ANNOTATION_SUFFIX: &str = ".fit.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceFile {
    pub format: String,
    pub version: u32,
    pub sequence: SequenceData,
}

/// Fit output for one sequence. Wall time is left out so the file is a pure
/// function of its inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub format: String,
    pub version: u32,
    pub sequence_id: String,
    /// Scenario seed of the fitted sequence.
    pub seed: u64,
    pub beta: ShapeParams,
    pub theta: Vec<PoseParams>,
    pub translation: Vec<Translation>,
    pub residual_rms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Fitted native joints per frame, metres.
    pub keypoints: Vec<Vec<Vec3>>,
    pub config: FitConfig,
}

impl AnnotationFile {
    pub fn new(seq: &SequenceData, fit: &FitResult, tree: &KinematicTree, config: &FitConfig) -> Self {
        Self {
            format: ANNOTATION_FORMAT.into(),
            version: FORMAT_VERSION,
            sequence_id: seq.spec.sequence_id.clone(),
            seed: seq.spec.seed,
            beta: fit.beta.clone(),
            theta: fit.theta.clone(),
            translation: fit.translation.clone(),
            residual_rms: fit.residual_rms.clone(),
            iterations: fit.iterations,
            converged: fit.converged,
            objective: fit.objective,
            keypoints: fit.keypoints(tree),
            config: config.clone(),
        }
    }
}

fn check_header(path: &Path, format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!("{}: expected format {expected}, found {format}", path.display())));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("{}: unsupported version {version}", path.display())));
    }
    Ok(())
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn temp_path(path: &Path) -> PathBuf {
    let n = TMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("out");
    path.with_file_name(format!(".{name}.{}.{n}.tmp", std::process::id()))
}

/// Writes `bytes` to `path` via a synced temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_sequence(path: &Path, seq: &SequenceData) -> Result<()> {
    let file = SequenceFile { format: SEQUENCE_FORMAT.into(), version: FORMAT_VERSION, sequence: seq.clone() };
    write_json_atomic(path, &file)
}

pub fn load_sequence(path: &Path) -> Result<SequenceData> {
    let file: SequenceFile = read_json(path)?;
    check_header(path, &file.format, file.version, SEQUENCE_FORMAT)?;
    Ok(file.sequence)
}

pub fn save_annotation(path: &Path, ann: &AnnotationFile) -> Result<()> {
    write_json_atomic(path, ann)
}

pub fn load_annotation(path: &Path) -> Result<AnnotationFile> {
    let file: AnnotationFile = read_json(path)?;
    check_header(path, &file.format, file.version, ANNOTATION_FORMAT)?;
    Ok(file)
}

/// Files in `dir` whose names end in `suffix`, sorted by name. A missing directory is empty.
pub fn list_files(dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_file() && path.file_name().and_then(|s| s.to_str()).is_some_and(|s| s.ends_with(suffix)) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

//! Quality gate applied to generated sequences before annotation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::OcclusionLabel;
use crate::synth::SequenceData;
use crate::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Reason {
    Stationary,
    SevereOcclusion,
    OutOfView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Metres per frame.
    pub min_mean_speed: f64,
    pub max_occluded_fraction: f64,
    pub max_out_of_frame_fraction: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { min_mean_speed: 0.005, max_occluded_fraction: 0.6, max_out_of_frame_fraction: 0.3 }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| (0.0..=1.0).contains(&v);
        if self.min_mean_speed.is_nan() || self.min_mean_speed < 0.0 {
            return Err(Error::InvalidArgument("min_mean_speed must be non-negative".into()));
        }
        if !frac(self.max_occluded_fraction) || !frac(self.max_out_of_frame_fraction) {
            return Err(Error::InvalidArgument("fraction thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub pass: bool,
    pub reasons: BTreeSet<Reason>,
    pub mean_speed: f64,
    pub occluded_fraction: f64,
    pub out_of_frame_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSpeed {
    /// Entry `t - 1` is the mean displacement between frames `t - 1` and `t`.
    pub per_frame: Vec<f64>,
    pub mean: f64,
}

/// Mean per-joint displacement between consecutive frames.
pub fn joint_speed(frames: &[Vec<Vec3>]) -> Result<JointSpeed> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!("joint speed needs at least 2 frames, got {}", frames.len())));
    }
    let mut per_frame = Vec::with_capacity(frames.len() - 1);
    for w in frames.windows(2) {
        if w[0].len() != w[1].len() || w[0].is_empty() {
            return Err(Error::DimensionMismatch { what: "frame joints", expected: w[0].len(), found: w[1].len() });
        }
        let s: f64 = w[0].iter().zip(&w[1]).map(|(a, b)| (b - a).norm()).sum();
        per_frame.push(s / w[0].len() as f64);
    }
    let mean = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok(JointSpeed { per_frame, mean })
}

pub fn sequence_speed(seq: &SequenceData) -> Result<JointSpeed> {
    let frames: Vec<Vec<Vec3>> = seq.frames.iter().map(|f| f.keypoints.clone()).collect();
    joint_speed(&frames)
}

/// Runs the three checks. Speed is taken over all keypoints; occlusion and
/// framing over the native joints.
pub fn quality_gate(seq: &SequenceData, thresholds: &Thresholds) -> Result<QualityReport> {
    let speed = sequence_speed(seq)?;
    let j = seq.joint_count;
    let total = (seq.len() * j) as f64;
    let mut occluded = 0usize;
    let mut out = 0usize;
    for f in &seq.frames {
        occluded += f.occlusion[..j].iter().filter(|l| **l != OcclusionLabel::Visible).count();
        out += f.projections[..j].iter().filter(|p| !p.in_frame || !p.in_front).count();
    }
    let occluded_fraction = occluded as f64 / total;
    let out_of_frame_fraction = out as f64 / total;
    let mut reasons = BTreeSet::new();
    if !(speed.mean >= thresholds.min_mean_speed) {
        reasons.insert(Reason::Stationary);
    }
    if occluded_fraction > thresholds.max_occluded_fraction {
        reasons.insert(Reason::SevereOcclusion);
    }
    if out_of_frame_fraction > thresholds.max_out_of_frame_fraction {
        reasons.insert(Reason::OutOfView);
    }
    Ok(QualityReport {
        pass: reasons.is_empty(),
        reasons,
        mean_speed: speed.mean,
        occluded_fraction,
        out_of_frame_fraction,
    })
}

//! Error-by-factor binning and dataset distribution summaries.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::camera::placement_angles;
use crate::error::{Error, Result};
use crate::io::{list_files, load_sequence, SEQUENCE_SUFFIX};
use crate::scene::OcclusionLabel;
use crate::synth::SequenceData;
use crate::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bins {
    /// `count` equal-width bins spanning the data range.
    Auto(usize),
    Uniform { count: usize, min: f64, max: f64 },
    /// Explicit increasing edges.
    Edges(Vec<f64>),
}

impl Bins {
    fn edges(&self, values: impl Iterator<Item = f64> + Clone) -> Result<Vec<f64>> {
        let uniform = |count: usize, min: f64, max: f64| -> Result<Vec<f64>> {
            if count == 0 || !(min < max) || !min.is_finite() || !max.is_finite() {
                return Err(Error::InvalidArgument(format!("bad bin range [{min}, {max}] x {count}")));
            }
            Ok((0..=count).map(|i| min + (max - min) * i as f64 / count as f64).collect())
        };
        match self {
            Bins::Auto(count) => {
                let min = values.clone().fold(f64::INFINITY, f64::min);
                let max = values.fold(f64::NEG_INFINITY, f64::max);
                if min == max {
                    uniform(*count, min - 0.5, max + 0.5)
                } else {
                    uniform(*count, min, max)
                }
            }
            Bins::Uniform { count, min, max } => uniform(*count, *min, *max),
            Bins::Edges(e) => {
                if e.len() < 2 || e.windows(2).any(|w| !(w[0] < w[1])) || e.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument("bin edges must be finite and strictly increasing".into()));
                }
                Ok(e.clone())
            }
        }
    }
}

/// Bin holding `v`; values outside the edges go to the first or last bin.
pub fn bin_index(edges: &[f64], v: f64) -> usize {
    let n = edges.len() - 1;
    if v <= edges[0] {
        return 0;
    }
    edges.partition_point(|e| *e <= v).saturating_sub(1).min(n - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub factor: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Mean error per bin in millimetres; `None` for empty bins.
    pub mean_error: Vec<Option<f64>>,
}

impl BinReport {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn empty_bins(&self) -> Vec<usize> {
        self.counts.iter().enumerate().filter(|(_, c)| **c == 0).map(|(i, _)| i).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("factor,bin_low,bin_high,count,mean_error_mm\n");
        for i in 0..self.counts.len() {
            let mean = self.mean_error[i].map_or_else(|| "NA".to_string(), |m| format!("{m}"));
            let _ = writeln!(s, "{},{},{},{},{}", self.factor, self.edges[i], self.edges[i + 1], self.counts[i], mean);
        }
        s
    }
}

/// Histogram of a factor with the mean error in each bin.
pub fn bin_density_analysis(factor: &str, records: &[(f64, f64)], bins: &Bins) -> Result<BinReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("no records to bin".into()));
    }
    if records.iter().any(|(v, e)| !v.is_finite() || !e.is_finite()) {
        return Err(Error::NonFinite("bin record".into()));
    }
    let edges = bins.edges(records.iter().map(|r| r.0))?;
    let n = edges.len() - 1;
    let mut counts = vec![0usize; n];
    let mut sums = vec![0.0; n];
    for (v, e) in records {
        let i = bin_index(&edges, *v);
        counts[i] += 1;
        sums[i] += e;
    }
    let mean_error = counts.iter().zip(&sums).map(|(c, s)| (*c > 0).then(|| s / *c as f64)).collect();
    Ok(BinReport { factor: factor.into(), edges, counts, mean_error })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn uniform(name: &str, count: usize, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            edges: (0..=count).map(|i| min + (max - min) * i as f64 / count as f64).collect(),
            counts: vec![0; count],
        }
    }

    pub fn add(&mut self, v: f64) {
        let i = bin_index(&self.edges, v);
        self.counts[i] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Bar chart as a standalone SVG document.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 320.0, 40.0);
        let max = self.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        let bw = (w - 2.0 * pad) / self.counts.len().max(1) as f64;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
        let _ = writeln!(s, r#"<text x="{pad}" y="20" font-family="sans-serif" font-size="14">{}</text>"#, self.name);
        let _ = writeln!(
            s,
            r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
            h - pad,
            w - pad,
            h - pad
        );
        for (i, c) in self.counts.iter().enumerate() {
            let bh = (h - 2.0 * pad - 10.0) * *c as f64 / max;
            let x = pad + bw * i as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{bh:.2}" fill="steelblue"><title>[{}, {}): {c}</title></rect>"#,
                h - pad - bh,
                (bw - 1.0).max(0.5),
                self.edges[i],
                self.edges[i + 1]
            );
        }
        let _ = writeln!(s, r#"<text x="{pad}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#, h - 12.0, self.edges[0]);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#,
            w - pad,
            h - 12.0,
            self.edges[self.edges.len() - 1]
        );
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionRates {
    pub visible: f64,
    pub occluded: f64,
    pub self_occluded: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub sequences: usize,
    pub frames: usize,
    /// Camera yaw around the subject, degrees in `[0, 360)`.
    pub yaw: Histogram,
    /// Camera elevation above the subject, degrees.
    pub elevation: Histogram,
    /// Camera distance to the subject, metres.
    pub distance: Histogram,
    /// RMS deviation of root-relative joints from their dataset mean, metres.
    pub pose_spread: Option<f64>,
    pub occlusion: Option<OcclusionRates>,
}

impl DatasetStats {
    pub fn histograms(&self) -> [&Histogram; 3] {
        [&self.yaw, &self.elevation, &self.distance]
    }

    /// One summary block followed by one row per histogram bin.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "key,value");
        let _ = writeln!(s, "sequences,{}", self.sequences);
        let _ = writeln!(s, "frames,{}", self.frames);
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |v| format!("{v}"));
        let _ = writeln!(s, "pose_spread_m,{}", opt(self.pose_spread));
        let _ = writeln!(s, "visible_fraction,{}", opt(self.occlusion.as_ref().map(|o| o.visible)));
        let _ = writeln!(s, "occluded_fraction,{}", opt(self.occlusion.as_ref().map(|o| o.occluded)));
        let _ = writeln!(s, "self_occluded_fraction,{}", opt(self.occlusion.as_ref().map(|o| o.self_occluded)));
        let _ = writeln!(s, "\nhistogram,bin_low,bin_high,count");
        for h in self.histograms() {
            for i in 0..h.counts.len() {
                let _ = writeln!(s, "{},{},{},{}", h.name, h.edges[i], h.edges[i + 1], h.counts[i]);
            }
        }
        s
    }
}

/// Streams sequences into a [`DatasetStats`].
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    sequences: usize,
    frames: usize,
    yaw: Histogram,
    elevation: Histogram,
    distance: Histogram,
    joint_sum: Vec<Vec3>,
    joint_sq: f64,
    joint_samples: usize,
    labels: [usize; 3],
}

impl Default for StatsAccumulator {
    fn default() -> Self {
        Self::new()
    }
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self {
            sequences: 0,
            frames: 0,
            yaw: Histogram::uniform("yaw_deg", 36, 0.0, 360.0),
            elevation: Histogram::uniform("elevation_deg", 18, -90.0, 90.0),
            distance: Histogram::uniform("distance_m", 20, 0.0, 20.0),
            joint_sum: Vec::new(),
            joint_sq: 0.0,
            joint_samples: 0,
            labels: [0; 3],
        }
    }

    pub fn add(&mut self, seq: &SequenceData) {
        if seq.is_empty() {
            return;
        }
        self.sequences += 1;
        self.frames += seq.len();
        let mean_root = seq.frames.iter().map(|f| f.keypoints[0]).sum::<Vec3>() / seq.len() as f64;
        let (yaw, elev, dist) = placement_angles(&(seq.frames[0].camera.position - mean_root));
        self.yaw.add(yaw.to_degrees());
        self.elevation.add(elev.to_degrees());
        self.distance.add(dist);

        let j = seq.joint_count;
        if self.joint_sum.is_empty() {
            self.joint_sum = vec![Vec3::zeros(); j];
        }
        for (f, frame) in seq.frames.iter().enumerate() {
            if self.joint_sum.len() == j {
                let native = seq.native_joints(f);
                for (acc, p) in self.joint_sum.iter_mut().zip(native) {
                    let rel = p - native[0];
                    *acc += rel;
                    self.joint_sq += rel.norm_squared();
                }
                self.joint_samples += 1;
            }
            for l in &frame.occlusion[..j] {
                let k = match l {
                    OcclusionLabel::Visible => 0,
                    OcclusionLabel::Occluded => 1,
                    OcclusionLabel::SelfOccluded => 2,
                };
                self.labels[k] += 1;
            }
        }
    }

    pub fn finish(self) -> DatasetStats {
        let pose_spread = (self.joint_samples > 0).then(|| {
            let n = self.joint_samples as f64;
            let j = self.joint_sum.len() as f64;
            let mean_sq: f64 = self.joint_sum.iter().map(|s| (s / n).norm_squared()).sum();
            ((self.joint_sq / n - mean_sq) / j).max(0.0).sqrt()
        });
        let total: usize = self.labels.iter().sum();
        let occlusion = (total > 0).then(|| {
            let t = total as f64;
            OcclusionRates {
                visible: self.labels[0] as f64 / t,
                occluded: self.labels[1] as f64 / t,
                self_occluded: self.labels[2] as f64 / t,
            }
        });
        DatasetStats {
            sequences: self.sequences,
            frames: self.frames,
            yaw: self.yaw,
            elevation: self.elevation,
            distance: self.distance,
            pose_spread,
            occlusion,
        }
    }
}

pub fn dataset_stats<'a>(seqs: impl IntoIterator<Item = &'a SequenceData>) -> DatasetStats {
    let mut acc = StatsAccumulator::new();
    for s in seqs {
        acc.add(s);
    }
    acc.finish()
}

/// Summarizes every `*.seq.json` file in `dir`, read one at a time.
pub fn dataset_stats_dir(dir: &Path) -> Result<DatasetStats> {
    let mut acc = StatsAccumulator::new();
    for path in list_files(dir, SEQUENCE_SUFFIX)? {
        acc.add(&load_sequence(&path)?);
    }
    Ok(acc.finish())
}

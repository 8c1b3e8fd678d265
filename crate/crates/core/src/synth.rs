//! Synthetic stand-in for the game engine: randomized scenarios, motion
//! catalogs and ground-truth-labeled keypoint sequences.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::body::{derive_extra_keypoints, KinematicTree, PoseParams, ShapeParams, Translation};
use crate::camera::{sample_camera, Camera, CameraDistribution, Projected};
use crate::rotation::{geodesic_angle, rodrigues};
use crate::scene::{label_frame, BodyRadii, OcclusionLabel, Primitive};
use crate::{Error, Result, Vec3};

pub const CLIP_FPS: u32 = 30;
pub const MIN_CLIP_FRAMES: usize = 30;
pub const MAX_CLIP_FRAMES: usize = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub beta: ShapeParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionClip {
    pub name: String,
    pub frames: Vec<PoseParams>,
    /// Root displacement per frame, meters, relative to the scenario location.
    pub root: Vec<Vec3>,
    pub fps: u32,
}

impl MotionClip {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        if !(MIN_CLIP_FRAMES..=MAX_CLIP_FRAMES).contains(&n) {
            return Err(Error::InvalidArgument(format!(
                "clip `{}` has {n} frames, expected {MIN_CLIP_FRAMES}..={MAX_CLIP_FRAMES}",
                self.name
            )));
        }
        if self.root.len() != n {
            return Err(Error::DimensionMismatch { what: "clip root trajectory", expected: n, found: self.root.len() });
        }
        for (t, pair) in self.frames.windows(2).enumerate() {
            for (a, b) in pair[0].0.iter().zip(&pair[1].0) {
                if geodesic_angle(&rodrigues(a), &rodrigues(b)) >= FRAC_PI_2 {
                    return Err(Error::InvalidArgument(format!(
                        "clip `{}` rotates a joint by more than 90 degrees at frame {}",
                        self.name,
                        t + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Subjects (each with a fixed shape) and motion clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Catalogs {
    pub subjects: Vec<Subject>,
    pub actions: Vec<MotionClip>,
}

impl Catalogs {
    /// Default catalogs for the 24-joint tree: 20 subjects with shapes in
    /// `[-2, 2]`, a walk, a squat and procedurally generated clips.
    pub fn standard(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..20)
            .map(|i| Subject {
                name: format!("subject_{i:02}"),
                beta: ShapeParams::new((0..crate::body::SHAPE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect())
                    .unwrap(),
            })
            .collect();
        let mut actions = vec![walk_clip(), squat_clip()];
        for i in 0..14 {
            actions.push(procedural_clip(&format!("procedural_{i:02}"), rng.random()));
        }
        Self { subjects, actions }
    }

    pub fn validate(&self) -> Result<()> {
        if self.subjects.is_empty() {
            return Err(Error::EmptyCatalog("subjects"));
        }
        if self.actions.is_empty() {
            return Err(Error::EmptyCatalog("actions"));
        }
        self.actions.iter().try_for_each(MotionClip::validate)
    }
}

// Joint indices of the default tree used by the clip generators.
mod j {
    pub const PELVIS: usize = 0;
    pub const L_HIP: usize = 1;
    pub const R_HIP: usize = 2;
    pub const SPINE1: usize = 3;
    pub const L_KNEE: usize = 4;
    pub const R_KNEE: usize = 5;
    pub const SPINE2: usize = 6;
    pub const L_ANKLE: usize = 7;
    pub const R_ANKLE: usize = 8;
    pub const SPINE3: usize = 9;
    pub const NECK: usize = 12;
    pub const L_COLLAR: usize = 13;
    pub const R_COLLAR: usize = 14;
    pub const HEAD: usize = 15;
    pub const L_SHOULDER: usize = 16;
    pub const R_SHOULDER: usize = 17;
    pub const L_ELBOW: usize = 18;
    pub const R_ELBOW: usize = 19;
    pub const L_WRIST: usize = 20;
    pub const R_WRIST: usize = 21;
}

const JOINTS: usize = 24;

// Arms hang about 70 degrees down from the T-pose.
fn relaxed_pose() -> Vec<Vec3> {
    let mut p = vec![Vec3::zeros(); JOINTS];
    p[j::L_SHOULDER] = Vec3::new(0.0, 0.0, -1.2);
    p[j::R_SHOULDER] = Vec3::new(0.0, 0.0, 1.2);
    p[j::L_ELBOW] = Vec3::new(0.0, -0.3, 0.0);
    p[j::R_ELBOW] = Vec3::new(0.0, 0.3, 0.0);
    p
}

fn clip_from(name: &str, frames: Vec<Vec<Vec3>>, root: Vec<Vec3>) -> MotionClip {
    MotionClip {
        name: name.into(),
        frames: frames.into_iter().map(|f| PoseParams::new(f).unwrap()).collect(),
        root,
        fps: CLIP_FPS,
    }
}

/// One-second gait cycle walking along +z at 0.6 m/s.
pub fn walk_clip() -> MotionClip {
    let n = 60;
    let w = TAU / CLIP_FPS as f64;
    let mut frames = Vec::with_capacity(n);
    let mut root = Vec::with_capacity(n);
    for t in 0..n {
        let ph = w * t as f64;
        let (s, c) = ph.sin_cos();
        let mut p = relaxed_pose();
        p[j::L_HIP].x = -0.4 * s;
        p[j::R_HIP].x = 0.4 * s;
        p[j::L_KNEE].x = 0.15 + 0.35 * (0.5 + 0.5 * (ph + 1.0).sin());
        p[j::R_KNEE].x = 0.15 + 0.35 * (0.5 - 0.5 * (ph + 1.0).sin());
        p[j::L_ANKLE].x = 0.1 * c;
        p[j::R_ANKLE].x = -0.1 * c;
        p[j::L_SHOULDER].x = 0.3 * s;
        p[j::R_SHOULDER].x = -0.3 * s;
        p[j::SPINE2].y = 0.08 * s;
        p[j::PELVIS].y = -0.05 * s;
        frames.push(p);
        root.push(Vec3::new(0.0, 0.02 * (2.0 * ph).cos(), 0.02 * t as f64));
    }
    clip_from("walk", frames, root)
}

/// Full squat and return over 50 frames.
pub fn squat_clip() -> MotionClip {
    let n = 50;
    let mut frames = Vec::with_capacity(n);
    let mut root = Vec::with_capacity(n);
    for t in 0..n {
        let depth = 0.5 - 0.5 * (TAU * t as f64 / (n - 1) as f64).cos();
        let mut p = relaxed_pose();
        p[j::L_HIP].x = -1.1 * depth;
        p[j::R_HIP].x = -1.1 * depth;
        p[j::L_KNEE].x = 1.5 * depth;
        p[j::R_KNEE].x = 1.5 * depth;
        p[j::L_ANKLE].x = -0.4 * depth;
        p[j::R_ANKLE].x = -0.4 * depth;
        p[j::SPINE1].x = 0.3 * depth;
        p[j::L_SHOULDER].x = -0.9 * depth;
        p[j::R_SHOULDER].x = -0.9 * depth;
        frames.push(p);
        root.push(Vec3::new(0.0, -0.35 * depth, -0.1 * depth));
    }
    clip_from("squat", frames, root)
}

/// Smooth clip built from low-frequency sinusoids on every articulated joint.
pub fn procedural_clip(name: &str, seed: u64) -> MotionClip {
    // (joint, per-axis amplitude in radians)
    const AMPLITUDES: [(usize, [f64; 3]); 20] = [
        (j::PELVIS, [0.1, 0.5, 0.1]),
        (j::L_HIP, [0.5, 0.15, 0.2]),
        (j::R_HIP, [0.5, 0.15, 0.2]),
        (j::SPINE1, [0.15, 0.15, 0.1]),
        (j::L_KNEE, [0.4, 0.0, 0.0]),
        (j::R_KNEE, [0.4, 0.0, 0.0]),
        (j::SPINE2, [0.1, 0.15, 0.1]),
        (j::L_ANKLE, [0.2, 0.05, 0.05]),
        (j::R_ANKLE, [0.2, 0.05, 0.05]),
        (j::SPINE3, [0.1, 0.1, 0.1]),
        (j::NECK, [0.2, 0.3, 0.1]),
        (j::L_COLLAR, [0.05, 0.1, 0.1]),
        (j::R_COLLAR, [0.05, 0.1, 0.1]),
        (j::HEAD, [0.1, 0.1, 0.1]),
        (j::L_SHOULDER, [0.5, 0.3, 0.4]),
        (j::R_SHOULDER, [0.5, 0.3, 0.4]),
        (j::L_ELBOW, [0.1, 0.5, 0.0]),
        (j::R_ELBOW, [0.1, 0.5, 0.0]),
        (j::L_WRIST, [0.2, 0.2, 0.2]),
        (j::R_WRIST, [0.2, 0.2, 0.2]),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(MIN_CLIP_FRAMES..=MAX_CLIP_FRAMES);
    // Per joint axis: two (amplitude, angular frequency per frame, phase) components.
    let waves: Vec<(usize, usize, [(f64, f64, f64); 2])> = AMPLITUDES
        .iter()
        .flat_map(|(joint, amp)| (0..3).map(move |axis| (*joint, axis, amp[axis])))
        .filter(|(_, _, a)| *a > 0.0)
        .map(|(joint, axis, a)| {
            let mut comp = || {
                let hz: f64 = rng.random_range(0.2..0.8);
                (a * rng.random_range(0.3..1.0), TAU * hz / CLIP_FPS as f64, rng.random_range(0.0..TAU))
            };
            (joint, axis, [comp(), comp()])
        })
        .collect();
    let heading = rng.random_range(0.0..TAU);
    let speed = rng.random_range(0.0..0.015);
    let dir = Vec3::new(heading.sin(), 0.0, heading.cos());
    let mut frames = Vec::with_capacity(n);
    let mut root = Vec::with_capacity(n);
    for t in 0..n {
        let tf = t as f64;
        let mut p = relaxed_pose();
        p[j::PELVIS].y = heading;
        p[j::L_KNEE].x = 0.4;
        p[j::R_KNEE].x = 0.4;
        p[j::L_ELBOW].y = -0.7;
        p[j::R_ELBOW].y = 0.7;
        for (joint, axis, comps) in &waves {
            let v: f64 = comps.iter().map(|(a, w, ph)| 0.5 * a * (w * tf + ph).sin()).sum();
            p[*joint][*axis] += v;
        }
        frames.push(p);
        root.push(dir * speed * tf + Vec3::new(0.0, 0.02 * (0.2 * tf).sin(), 0.0));
    }
    clip_from(name, frames, root)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weather {
    Clear,
    Clouds,
    Overcast,
    Rain,
    Thunder,
    Fog,
    Snow,
}

const WEATHERS: [Weather; 7] =
    [Weather::Clear, Weather::Clouds, Weather::Overcast, Weather::Rain, Weather::Thunder, Weather::Fog, Weather::Snow];

/// Randomized attributes of one sequence. Weather and time of day are metadata only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub sequence_id: String,
    pub subject_id: usize,
    pub action_id: usize,
    /// World position the motion clip is anchored at, meters.
    pub location: Vec3,
    pub camera_seed: u64,
    /// Name of the camera distribution the camera is drawn from.
    pub camera_profile: String,
    pub weather: Weather,
    /// Hours in `[0, 24)`.
    pub time_of_day: f64,
    pub seed: u64,
}

/// Draws every scenario attribute independently from `seed`.
pub fn generate_scenario(sequence_id: &str, seed: u64, catalogs: &Catalogs, camera_profile: &str) -> Result<ScenarioSpec> {
    if catalogs.subjects.is_empty() {
        return Err(Error::EmptyCatalog("subjects"));
    }
    if catalogs.actions.is_empty() {
        return Err(Error::EmptyCatalog("actions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ScenarioSpec {
        sequence_id: sequence_id.to_string(),
        subject_id: rng.random_range(0..catalogs.subjects.len()),
        action_id: rng.random_range(0..catalogs.actions.len()),
        location: Vec3::new(rng.random_range(-50.0..50.0), 0.0, rng.random_range(-50.0..50.0)),
        camera_seed: rng.random(),
        camera_profile: camera_profile.to_string(),
        weather: WEATHERS[rng.random_range(0..WEATHERS.len())],
        time_of_day: rng.random_range(0.0..24.0),
        seed,
    })
}

/// Everything that stays fixed across sequences: body, environment, camera model.
#[derive(Debug, Clone)]
pub struct World {
    pub tree: KinematicTree,
    /// Environment primitives, relative to the scenario location.
    pub scene: Vec<Primitive>,
    pub camera: CameraDistribution,
    /// Body capsule radii for self-occlusion; `None` disables the body proxy.
    pub body_radii: Option<BodyRadii>,
}

impl World {
    pub fn standard() -> Self {
        Self {
            tree: KinematicTree::smpl_like(),
            scene: Vec::new(),
            camera: CameraDistribution::default(),
            body_radii: Some(BodyRadii::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameData {
    /// Native joints followed by the derived keypoints, meters.
    pub keypoints: Vec<Vec3>,
    pub projections: Vec<Projected>,
    /// One label per native joint.
    pub occlusion: Vec<OcclusionLabel>,
    pub camera: Camera,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: ShapeParams,
    pub theta: Vec<PoseParams>,
    pub translation: Vec<Translation>,
}

/// One video-sequence unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceData {
    pub spec: ScenarioSpec,
    /// Number of native joints at the start of every keypoint array.
    pub joint_count: usize,
    pub keypoint_names: Vec<String>,
    pub frames: Vec<FrameData>,
    pub ground_truth: Option<GroundTruth>,
    /// Standard deviation of keypoint noise applied so far, meters per axis.
    pub noise_sigma: f64,
}

impl SequenceData {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn native_joints(&self, frame: usize) -> &[Vec3] {
        &self.frames[frame].keypoints[..self.joint_count]
    }
}

/// Renders a scenario into ground-truth keypoints, projections and occlusion labels.
pub fn synthesize_sequence(spec: &ScenarioSpec, world: &World, catalogs: &Catalogs) -> Result<SequenceData> {
    let subject = catalogs.subjects.get(spec.subject_id).ok_or(Error::EmptyCatalog("subjects"))?;
    let clip = catalogs.actions.get(spec.action_id).ok_or(Error::EmptyCatalog("actions"))?;
    clip.validate()?;
    let tree = &world.tree;
    tree.check_shape(&subject.beta)?;

    let translations: Vec<Translation> = clip.root.iter().map(|r| Translation(spec.location + r)).collect();
    let joints = clip
        .frames
        .iter()
        .zip(&translations)
        .map(|(theta, t)| tree.forward_kinematics(theta, &subject.beta, t))
        .collect::<Result<Vec<_>>>()?;
    let keypoints = joints.iter().map(|j| derive_extra_keypoints(j, tree)).collect::<Result<Vec<_>>>()?;

    let mean_root = joints.iter().map(|j| j[0]).sum::<Vec3>() / joints.len() as f64;
    let camera = sample_camera(&world.camera, &mean_root, spec.camera_seed)?;
    let scene: Vec<Primitive> = world.scene.iter().map(|p| p.translated(&spec.location)).collect();

    let frames = joints
        .iter()
        .zip(keypoints)
        .map(|(native, kp)| FrameData {
            projections: camera.project(&kp),
            occlusion: label_frame(native, tree, &camera, &scene, world.body_radii.as_ref()),
            keypoints: kp,
            camera,
        })
        .collect();

    let mut names = tree.names().to_vec();
    names.extend(crate::body::EXTRA_KEYPOINT_NAMES.iter().map(|s| s.to_string()));
    Ok(SequenceData {
        spec: spec.clone(),
        joint_count: tree.joint_count(),
        keypoint_names: names,
        frames,
        ground_truth: Some(GroundTruth { beta: subject.beta.clone(), theta: clip.frames.clone(), translation: translations }),
        noise_sigma: 0.0,
    })
}

/// Synthesizes independent scenarios, in parallel when the `parallel` feature is on.
pub fn synthesize_batch(specs: &[ScenarioSpec], world: &World, catalogs: &Catalogs) -> Vec<Result<SequenceData>> {
    crate::exec::map_slice(specs, |s| synthesize_sequence(s, world, catalogs))
}

/// Adds i.i.d. Gaussian noise to every keypoint coordinate and re-projects.
///
/// Ground truth and occlusion labels are kept from the clean sequence.
pub fn add_noise(seq: &SequenceData, sigma: f64, seed: u64) -> Result<SequenceData> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("noise sigma must be nonnegative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(seq.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = seq.clone();
    for frame in &mut out.frames {
        for p in &mut frame.keypoints {
            *p += Vec3::new(normal.sample(&mut rng), normal.sample(&mut rng), normal.sample(&mut rng));
        }
        frame.projections = frame.camera.project(&frame.keypoints);
    }
    out.noise_sigma = (seq.noise_sigma.powi(2) + sigma * sigma).sqrt();
    Ok(out)
}

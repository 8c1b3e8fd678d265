//! Sequence fitting of body parameters to 3D keypoints.
//!
//! The fit runs in three stages: a closed-form initialization from bone
//! directions, an independent pose solve per frame with shape frozen at zero,
//! and a joint refinement of one shape and all frames with rotation smoothing
//! switched on.

mod init;
pub mod model;
pub mod solver;

use std::time::Instant;

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::body::{KinematicTree, PoseParams, ShapeParams, Translation};
use crate::error::{Error, Result};
use crate::rotation::{canonicalize, log_map, rodrigues};
use crate::synth::SequenceData;
use crate::Vec3;

pub use model::{FitState, Problem};
use solver::{levenberg_marquardt, DenseSystem, LmSettings};

/// Minimum number of usable joints per frame.
pub const MIN_JOINTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Per-frame solve followed by a joint refinement with smoothing.
    #[default]
    Staged,
    /// Per-frame solve only; frames are independent and shape stays at zero.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub lambda_data: f64,
    pub lambda_smooth: f64,
    pub lambda_shape: f64,
    pub max_iterations_frame: usize,
    pub max_iterations_joint: usize,
    /// Early stop once an accepted step lowers the objective by less than this.
    pub tolerance: f64,
    pub schedule: Schedule,
    pub initial_damping: f64,
    /// A warm-started frame whose RMS (m) exceeds this is also tried from the rest pose.
    pub restart_rms: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda_data: 1.0,
            lambda_smooth: 0.1,
            lambda_shape: 1e-3,
            max_iterations_frame: 200,
            max_iterations_joint: 100,
            tolerance: 1e-10,
            schedule: Schedule::Staged,
            initial_damping: 1e-3,
            restart_rms: 0.01,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [self.lambda_data, self.lambda_smooth, self.lambda_shape];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("fit weights must be finite and non-negative".into()));
        }
        if !(self.tolerance > 0.0) || !(self.initial_damping > 0.0) || !(self.restart_rms >= 0.0) {
            return Err(Error::InvalidArgument("tolerance and damping must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub beta: ShapeParams,
    pub theta: Vec<PoseParams>,
    pub translation: Vec<Translation>,
    /// Keypoint RMS per frame over usable joints, metres.
    pub residual_rms: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Final value of the full objective.
    pub objective: f64,
    /// Objective after each accepted step of the last stage.
    pub history: Vec<f64>,
    pub wall_time_per_frame: f64,
}

impl FitResult {
    pub fn frames(&self) -> usize {
        self.theta.len()
    }

    /// Posed joints of every frame.
    pub fn keypoints(&self, tree: &KinematicTree) -> Vec<Vec<Vec3>> {
        let offsets = model::bone_offsets(tree, &self.beta.0);
        self.theta
            .iter()
            .zip(&self.translation)
            .map(|(th, t)| tree.pose_offsets(th, &offsets, &t.0).positions)
            .collect()
    }
}

fn check_mask(mask: &[bool]) -> Result<usize> {
    let n = mask.iter().filter(|m| **m).count();
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(n)
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { what, expected, found });
    }
    Ok(())
}

/// Root-sum-of-squares distance over masked joints, in the inputs' unit.
pub fn loss_3d(pred: &[Vec3], target: &[Vec3], mask: &[bool]) -> Result<f64> {
    check_len("target", pred.len(), target.len())?;
    check_len("mask", pred.len(), mask.len())?;
    check_mask(mask)?;
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, t), _)| (p - t).norm_squared())
        .sum::<f64>()
        .sqrt())
}

/// Root-sum-of-squares pixel distance over masked keypoints.
pub fn loss_2d(pred: &[Vector2<f64>], target: &[Vector2<f64>], mask: &[bool]) -> Result<f64> {
    check_len("target", pred.len(), target.len())?;
    check_len("mask", pred.len(), mask.len())?;
    check_mask(mask)?;
    Ok(pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, t), _)| (p - t).norm_squared())
        .sum::<f64>()
        .sqrt())
}

/// `‖θ - θ̂‖ + ‖β - β̂‖` over the flattened parameters.
pub fn loss_smpl(theta: &PoseParams, beta: &ShapeParams, theta_hat: &PoseParams, beta_hat: &ShapeParams) -> Result<f64> {
    check_len("theta", theta.joints(), theta_hat.joints())?;
    check_len("beta", beta.0.len(), beta_hat.0.len())?;
    let dt: f64 = theta.0.iter().zip(&theta_hat.0).map(|(a, b)| (a - b).norm_squared()).sum();
    Ok(dt.sqrt() + (&beta.0 - &beta_hat.0).norm())
}

/// Sum of squared geodesic angles between consecutive frames, per joint.
pub fn smoothness_term(theta: &[PoseParams]) -> f64 {
    theta
        .windows(2)
        .map(|w| {
            w[0].0
                .iter()
                .zip(&w[1].0)
                .map(|(a, b)| log_map(&(rodrigues(a).transpose() * rodrigues(b))).norm_squared())
                .sum::<f64>()
        })
        .sum()
}

/// 3D targets and usable-joint masks of the native joints of a sequence.
///
/// A joint is usable when it is in front of the camera and finite.
pub fn targets_from_sequence(seq: &SequenceData) -> (Vec<Vec<Vec3>>, Vec<Vec<bool>>) {
    let j = seq.joint_count;
    let targets: Vec<Vec<Vec3>> = (0..seq.len()).map(|f| seq.native_joints(f).to_vec()).collect();
    let masks = seq
        .frames
        .iter()
        .map(|fr| {
            (0..j)
                .map(|i| fr.projections[i].in_front && fr.keypoints[i].iter().all(|c| c.is_finite()))
                .collect()
        })
        .collect();
    (targets, masks)
}

pub fn fit_sequence_data(seq: &SequenceData, tree: &KinematicTree, config: &FitConfig) -> Result<FitResult> {
    let (targets, masks) = targets_from_sequence(seq);
    fit_sequence(&targets, &masks, tree, config)
}

fn validate_inputs(targets: &[Vec<Vec3>], masks: &[Vec<bool>], tree: &KinematicTree) -> Result<()> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("sequence has no frames".into()));
    }
    check_len("masks", targets.len(), masks.len())?;
    for (f, (t, m)) in targets.iter().zip(masks).enumerate() {
        check_len("frame joints", tree.joint_count(), t.len())?;
        check_len("mask joints", tree.joint_count(), m.len())?;
        let usable = m.iter().filter(|x| **x).count();
        if usable < MIN_JOINTS {
            return Err(Error::TooFewJoints { frame: f, found: usable, required: MIN_JOINTS });
        }
        if t.iter().zip(m).any(|(p, m)| *m && !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("target keypoint in frame {f}")));
        }
    }
    Ok(())
}

fn frame_vector(theta: &[Vec3], t: &Vec3) -> DVector<f64> {
    let mut v: Vec<f64> = theta.iter().flat_map(|w| [w.x, w.y, w.z]).collect();
    v.extend([t.x, t.y, t.z]);
    DVector::from_vec(v)
}

fn split_frame(v: &DVector<f64>, joints: usize) -> (Vec<Vec3>, Vec3) {
    let theta = (0..joints).map(|j| Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])).collect();
    (theta, Vec3::new(v[3 * joints], v[3 * joints + 1], v[3 * joints + 2]))
}

struct FrameFit {
    params: DVector<f64>,
    cost: f64,
    iterations: usize,
    converged: bool,
}

fn fit_frame(tree: &KinematicTree, offsets: &[Vec3], target: &[Vec3], mask: &[bool], start: DVector<f64>, settings: LmSettings) -> FrameFit {
    let joints = tree.joint_count();
    let linearize = |v: &DVector<f64>| {
        let (theta, t) = split_frame(v, joints);
        let lin = model::linearize_frame(tree, offsets, &theta, &t, target, mask, false);
        DenseSystem { h: lin.jac_pose.tr_mul(&lin.jac_pose), g: lin.jac_pose.tr_mul(&lin.residual), cost: lin.cost }
    };
    let cost = |v: &DVector<f64>| {
        let (theta, t) = split_frame(v, joints);
        model::frame_cost(tree, offsets, &theta, &t, target, mask)
    };
    let out = levenberg_marquardt(start, settings, linearize, cost, |v, d| v + d);
    FrameFit { params: out.state, cost: out.cost, iterations: out.iterations, converged: out.converged }
}

fn frame_rms(cost: f64, mask: &[bool]) -> f64 {
    (cost / mask.iter().filter(|m| **m).count() as f64).sqrt()
}

/// Fits one shape and per-frame pose and translation to keypoint targets.
///
/// `targets[f][j]` is joint `j` of frame `f`; joints with `masks[f][j] == false`
/// are left out of the data term.
pub fn fit_sequence(targets: &[Vec<Vec3>], masks: &[Vec<bool>], tree: &KinematicTree, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    validate_inputs(targets, masks, tree)?;
    let start = Instant::now();
    let joints = tree.joint_count();
    let k = tree.shape_dim();
    let frames = targets.len();
    let beta0 = DVector::zeros(k);
    let offsets = model::bone_offsets(tree, &beta0);

    let frame_settings = LmSettings {
        max_iterations: config.max_iterations_frame,
        tolerance: config.tolerance,
        initial_damping: config.initial_damping,
    };
    let mut theta = Vec::with_capacity(frames);
    let mut translation = Vec::with_capacity(frames);
    let mut iterations = 0;
    let mut converged = true;
    let mut prev_theta: Option<Vec<Vec3>> = None;
    for f in 0..frames {
        let (init_theta, t0) = init::initial_pose(tree, &offsets, &targets[f], &masks[f]);
        let warm = prev_theta.as_deref().unwrap_or(&init_theta);
        let mut best = fit_frame(tree, &offsets, &targets[f], &masks[f], frame_vector(warm, &t0), frame_settings);
        iterations += best.iterations;
        if prev_theta.is_some() && frame_rms(best.cost, &masks[f]) > config.restart_rms {
            let cold = fit_frame(tree, &offsets, &targets[f], &masks[f], frame_vector(&init_theta, &t0), frame_settings);
            iterations += cold.iterations;
            if cold.cost < best.cost {
                best = cold;
            }
        }
        converged &= best.converged;
        let (th, t) = split_frame(&best.params, joints);
        prev_theta = Some(th.clone());
        theta.push(th);
        translation.push(t);
    }
    let mut state = FitState { beta: beta0, theta, translation };
    let problem = Problem { tree, targets, masks, config };
    let mut history = vec![problem.objective(&state)];

    if config.schedule == Schedule::Staged {
        let settings = LmSettings {
            max_iterations: config.max_iterations_joint,
            tolerance: config.tolerance,
            initial_damping: config.initial_damping,
        };
        let out = levenberg_marquardt(
            state,
            settings,
            |s| problem.normal_equations(s),
            |s| problem.objective(s),
            model::apply_step,
        );
        state = out.state;
        iterations += out.iterations;
        converged &= out.converged;
        history = out.history;
    }

    let objective = problem.objective(&state);
    let offsets = model::bone_offsets(tree, &state.beta);
    let residual_rms = (0..frames)
        .map(|f| {
            let c = model::frame_cost(tree, &offsets, &state.theta[f], &state.translation[f], &targets[f], &masks[f]);
            frame_rms(c, &masks[f])
        })
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    Ok(FitResult {
        beta: ShapeParams(state.beta),
        theta: state.theta.into_iter().map(|th| PoseParams(th.iter().map(canonicalize).collect())).collect(),
        translation: state.translation.into_iter().map(Translation).collect(),
        residual_rms,
        iterations,
        converged,
        objective,
        history,
        wall_time_per_frame: elapsed / frames as f64,
    })
}

/// Gradient of the full objective in the [`FitState::to_vector`] layout.
pub fn objective_gradient(state: &FitState, targets: &[Vec<Vec3>], masks: &[Vec<bool>], tree: &KinematicTree, config: &FitConfig) -> DVector<f64> {
    Problem { tree, targets, masks, config }.gradient(state)
}

/// Full objective at `state`.
pub fn objective(state: &FitState, targets: &[Vec<Vec3>], masks: &[Vec<bool>], tree: &KinematicTree, config: &FitConfig) -> f64 {
    Problem { tree, targets, masks, config }.objective(state)
}

/// Fits independent sequences, in parallel when the `parallel` feature is on.
pub fn fit_batch(seqs: &[SequenceData], tree: &KinematicTree, config: &FitConfig) -> Vec<Result<FitResult>> {
    crate::exec::map_slice(seqs, |s| fit_sequence_data(s, tree, config))
}

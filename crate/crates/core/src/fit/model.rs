//! Residuals, Jacobians and the objective of the sequence fit.

use nalgebra::{DMatrix, DVector};

use crate::body::{KinematicTree, PoseParams};
use crate::rotation::{left_jacobian, log_map, right_jacobian, right_jacobian_inv, rodrigues, skew};
use crate::{Mat3, Vec3};

use super::FitConfig;

/// Free parameters of a sequence fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub beta: DVector<f64>,
    /// `T x J` axis-angle rotations.
    pub theta: Vec<Vec<Vec3>>,
    pub translation: Vec<Vec3>,
}

impl FitState {
    pub fn frames(&self) -> usize {
        self.theta.len()
    }

    /// Parameters per frame: `3J` rotation entries then 3 translation entries.
    pub fn frame_dim(&self) -> usize {
        self.theta.first().map_or(3, |t| 3 * t.len() + 3)
    }

    /// Flat layout: shape first, then each frame's rotations and translation.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.beta.len() + self.frames() * self.frame_dim());
        v.extend(self.beta.iter());
        for (theta, t) in self.theta.iter().zip(&self.translation) {
            v.extend(theta.iter().flat_map(|w| [w.x, w.y, w.z]));
            v.extend([t.x, t.y, t.z]);
        }
        DVector::from_vec(v)
    }

    pub fn from_vector(v: &DVector<f64>, shape_dim: usize, frames: usize, joints: usize) -> Self {
        let beta = DVector::from_column_slice(&v.as_slice()[..shape_dim]);
        let fd = 3 * joints + 3;
        let mut theta = Vec::with_capacity(frames);
        let mut translation = Vec::with_capacity(frames);
        for f in 0..frames {
            let s = &v.as_slice()[shape_dim + f * fd..shape_dim + (f + 1) * fd];
            theta.push((0..joints).map(|j| Vec3::new(s[3 * j], s[3 * j + 1], s[3 * j + 2])).collect());
            translation.push(Vec3::new(s[3 * joints], s[3 * joints + 1], s[3 * joints + 2]));
        }
        Self { beta, theta, translation }
    }
}

/// Targets and masks for every frame.
pub struct Problem<'a> {
    pub tree: &'a KinematicTree,
    pub targets: &'a [Vec<Vec3>],
    pub masks: &'a [Vec<bool>],
    pub config: &'a FitConfig,
}

/// Data-term linearization of one frame around the current parameters.
pub struct FrameLinearization {
    /// Posed minus target, zero on masked-out joints.
    pub residual: DVector<f64>,
    /// `3J x (3J + 3)`: derivative w.r.t. the frame's rotations and translation.
    pub jac_pose: DMatrix<f64>,
    /// `3J x K`: derivative w.r.t. shape, when requested.
    pub jac_shape: Option<DMatrix<f64>>,
    pub cost: f64,
}

pub fn bone_offsets(tree: &KinematicTree, beta: &DVector<f64>) -> Vec<Vec3> {
    tree.rest_offsets()
        .iter()
        .enumerate()
        .map(|(i, rest)| rest + tree.shape_blend(i) * beta)
        .collect()
}

pub fn pose(tree: &KinematicTree, theta: &[Vec3], offsets: &[Vec3], t: &Vec3) -> crate::body::Posed {
    tree.pose_offsets(&PoseParams(theta.to_vec()), offsets, t)
}

/// Sum of squared keypoint errors over unmasked joints of one frame.
pub fn frame_cost(tree: &KinematicTree, offsets: &[Vec3], theta: &[Vec3], t: &Vec3, target: &[Vec3], mask: &[bool]) -> f64 {
    let posed = pose(tree, theta, offsets, t);
    posed
        .positions
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, x), _)| (p - x).norm_squared())
        .sum()
}

pub fn linearize_frame(
    tree: &KinematicTree,
    offsets: &[Vec3],
    theta: &[Vec3],
    t: &Vec3,
    target: &[Vec3],
    mask: &[bool],
    with_shape: bool,
) -> FrameLinearization {
    let joints = tree.joint_count();
    let k = tree.shape_dim();
    let posed = pose(tree, theta, offsets, t);
    let p = &posed.positions;

    // Per joint: parent's global rotation times the left Jacobian of its own rotation,
    // and the parent's global rotation applied to its shape blend.
    let parent_rot: Vec<Mat3> = (0..joints)
        .map(|a| tree.parent(a).map_or_else(Mat3::identity, |pa| posed.global[pa]))
        .collect();
    let rot_jac: Vec<Mat3> = (0..joints).map(|a| parent_rot[a] * left_jacobian(&theta[a])).collect();

    let mut residual = DVector::zeros(3 * joints);
    let mut jac_pose = DMatrix::zeros(3 * joints, 3 * joints + 3);
    let mut jac_shape = with_shape.then(|| DMatrix::zeros(3 * joints, k));
    let mut cost = 0.0;
    for i in 0..joints {
        if !mask[i] {
            continue;
        }
        let r = p[i] - target[i];
        cost += r.norm_squared();
        residual.fixed_rows_mut::<3>(3 * i).copy_from(&r);
        jac_pose.fixed_view_mut::<3, 3>(3 * i, 3 * joints).copy_from(&Mat3::identity());
        let mut cur = i;
        loop {
            if let Some(js) = jac_shape.as_mut() {
                let blend = parent_rot[cur] * tree.shape_blend(cur);
                let mut rows = js.rows_mut(3 * i, 3);
                rows += blend;
            }
            match tree.parent(cur) {
                Some(pa) => {
                    let block = -skew(&(p[i] - p[pa])) * rot_jac[pa];
                    jac_pose.fixed_view_mut::<3, 3>(3 * i, 3 * pa).copy_from(&block);
                    cur = pa;
                }
                None => break,
            }
        }
    }
    FrameLinearization { residual, jac_pose, jac_shape, cost }
}

/// Relative rotation between consecutive frames and its derivatives.
pub struct SmoothLink {
    /// `log(R_prevᵀ R_next)`; its norm is the geodesic angle.
    pub residual: Vec3,
    pub d_next: Mat3,
    pub d_prev: Mat3,
}

pub fn smooth_link(prev: &Vec3, next: &Vec3) -> SmoothLink {
    let e = rodrigues(prev).transpose() * rodrigues(next);
    let r = log_map(&e);
    let jinv = right_jacobian_inv(&r);
    SmoothLink {
        residual: r,
        d_next: jinv * right_jacobian(next),
        d_prev: -(jinv * e.transpose() * right_jacobian(prev)),
    }
}

/// Sum over consecutive frames and joints of the squared geodesic angle.
pub fn smoothness(theta: &[Vec<Vec3>]) -> f64 {
    theta
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| log_map(&(rodrigues(a).transpose() * rodrigues(b))).norm_squared()).sum::<f64>())
        .sum()
}

impl Problem<'_> {
    pub fn joints(&self) -> usize {
        self.tree.joint_count()
    }

    /// Full objective: weighted data, smoothing and shape terms.
    pub fn objective(&self, state: &FitState) -> f64 {
        let offsets = bone_offsets(self.tree, &state.beta);
        let data: f64 = (0..state.frames())
            .map(|f| {
                frame_cost(self.tree, &offsets, &state.theta[f], &state.translation[f], &self.targets[f], &self.masks[f])
            })
            .sum();
        let c = self.config;
        c.lambda_data * data + c.lambda_smooth * smoothness(&state.theta) + c.lambda_shape * state.beta.norm_squared()
    }

    /// Gradient of [`Problem::objective`] in the [`FitState::to_vector`] layout.
    pub fn gradient(&self, state: &FitState) -> DVector<f64> {
        use super::solver::Linearized;
        self.normal_equations(state).half_gradient() * 2.0
    }

    /// Gauss-Newton system `H = Σ w JᵀJ`, `g = Σ w Jᵀr` in arrowhead block form.
    pub fn normal_equations(&self, state: &FitState) -> super::solver::ArrowSystem {
        use super::solver::{ArrowSystem, FrameBlock};
        let c = self.config;
        let joints = self.joints();
        let k = self.tree.shape_dim();
        let fd = 3 * joints + 3;
        let offsets = bone_offsets(self.tree, &state.beta);
        let mut frames = Vec::with_capacity(state.frames());
        let mut c_shape = DMatrix::identity(k, k) * c.lambda_shape;
        let mut g_shape = &state.beta * c.lambda_shape;
        let mut cost = c.lambda_shape * state.beta.norm_squared();
        for f in 0..state.frames() {
            let lin = linearize_frame(
                self.tree,
                &offsets,
                &state.theta[f],
                &state.translation[f],
                &self.targets[f],
                &self.masks[f],
                true,
            );
            let js = lin.jac_shape.as_ref().unwrap();
            let d = lin.jac_pose.tr_mul(&lin.jac_pose) * c.lambda_data;
            let b = lin.jac_pose.tr_mul(js) * c.lambda_data;
            c_shape += js.tr_mul(js) * c.lambda_data;
            g_shape += js.tr_mul(&lin.residual) * c.lambda_data;
            let g = lin.jac_pose.tr_mul(&lin.residual) * c.lambda_data;
            cost += c.lambda_data * lin.cost;
            frames.push(FrameBlock { d, b, g, coupling: vec![Mat3::zeros(); joints] });
        }
        if c.lambda_smooth > 0.0 {
            let w = c.lambda_smooth;
            for f in 1..state.frames() {
                for j in 0..joints {
                    let link = smooth_link(&state.theta[f - 1][j], &state.theta[f][j]);
                    let (a, bm, r) = (link.d_next, link.d_prev, link.residual);
                    cost += w * r.norm_squared();
                    let s = 3 * j;
                    {
                        let next = &mut frames[f];
                        let mut dn = next.d.fixed_view_mut::<3, 3>(s, s);
                        dn += a.transpose() * a * w;
                        let mut gn = next.g.fixed_rows_mut::<3>(s);
                        gn += a.transpose() * r * w;
                        next.coupling[j] += bm.transpose() * a * w;
                    }
                    let prev = &mut frames[f - 1];
                    let mut dp = prev.d.fixed_view_mut::<3, 3>(s, s);
                    dp += bm.transpose() * bm * w;
                    let mut gp = prev.g.fixed_rows_mut::<3>(s);
                    gp += bm.transpose() * r * w;
                }
            }
        }
        ArrowSystem { frames, c: c_shape, g_shape, shape_dim: k, frame_dim: fd, cost }
    }
}

/// State with every parameter shifted by `step` (in the flat layout), shape clamped to bounds.
pub fn apply_step(state: &FitState, step: &DVector<f64>) -> FitState {
    let k = state.beta.len();
    let joints = state.theta.first().map_or(0, |t| t.len());
    let mut v = state.to_vector() + step;
    for b in v.rows_mut(0, k).iter_mut() {
        *b = b.clamp(-crate::body::SHAPE_BOUND, crate::body::SHAPE_BOUND);
    }
    FitState::from_vector(&v, k, state.frames(), joints)
}

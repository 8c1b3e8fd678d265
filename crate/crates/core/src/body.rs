//! Keypoint-level parametric body: a kinematic tree whose bone offsets depend
//! linearly on shape coefficients, posed by per-joint axis-angle rotations.

use nalgebra::{DVector, Matrix3xX};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::rotation::{canonicalize, rodrigues};
use crate::{Error, Mat3, Result, Vec3};

/// Number of shape coefficients in the default body.
pub const SHAPE_DIM: usize = 10;
/// Bound on every shape coefficient, for sampling and fitting.
pub const SHAPE_BOUND: f64 = 5.0;

/// Rooted joint hierarchy with rest offsets and linear shape correctives.
///
/// Joint 0 is the root; its rest offset is its absolute rest position.
#[derive(Debug, Clone, PartialEq)]
pub struct KinematicTree {
    parents: Vec<Option<usize>>,
    rest_offsets: Vec<Vec3>,
    shape_blend: Vec<Matrix3xX<f64>>,
    names: Vec<String>,
    shape_dim: usize,
}

/// On-disk form of a [`KinematicTree`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TreeFile {
    pub format: String,
    pub version: u32,
    pub joint_count: usize,
    /// Parent of joints `1..joint_count`, in order.
    pub parents: Vec<usize>,
    pub rest_offsets: Vec<[f64; 3]>,
    /// `joint_count x 3 x shape_dim`, meters per unit coefficient.
    pub shape_blend: Vec<[Vec<f64>; 3]>,
    pub names: Vec<String>,
}

pub const TREE_FORMAT: &str = "synthpose.tree";

impl KinematicTree {
    /// Builds and validates a tree. `parents[i]` is the parent of joint `i + 1`.
    pub fn new(
        parents: &[usize],
        rest_offsets: Vec<Vec3>,
        shape_blend: Vec<Matrix3xX<f64>>,
        names: Vec<String>,
    ) -> Result<Self> {
        let joints = rest_offsets.len();
        if joints == 0 {
            return Err(Error::InvalidTree("tree has no joints".into()));
        }
        if parents.len() + 1 != joints {
            return Err(Error::DimensionMismatch {
                what: "parents",
                expected: joints - 1,
                found: parents.len(),
            });
        }
        if names.len() != joints {
            return Err(Error::DimensionMismatch { what: "names", expected: joints, found: names.len() });
        }
        if shape_blend.len() != joints {
            return Err(Error::DimensionMismatch {
                what: "shape_blend",
                expected: joints,
                found: shape_blend.len(),
            });
        }
        let shape_dim = shape_blend[0].ncols();
        if let Some(bad) = shape_blend.iter().find(|b| b.ncols() != shape_dim) {
            return Err(Error::DimensionMismatch { what: "shape_blend columns", expected: shape_dim, found: bad.ncols() });
        }
        for (i, &p) in parents.iter().enumerate() {
            let child = i + 1;
            if p >= child {
                return Err(Error::InvalidTree(format!(
                    "parent {p} of joint {child} is not topologically ordered"
                )));
            }
            if !(rest_offsets[child].norm() > 0.0) {
                return Err(Error::InvalidTree(format!("bone ending at joint {child} has zero rest length")));
            }
        }
        if rest_offsets.iter().any(|o| !o.iter().all(|v| v.is_finite()))
            || shape_blend.iter().any(|b| !b.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite("tree offsets".into()));
        }
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::InvalidTree(format!("duplicate joint name `{n}`")));
            }
        }
        let parents = std::iter::once(None).chain(parents.iter().map(|&p| Some(p))).collect();
        Ok(Self { parents, rest_offsets, shape_blend, names, shape_dim })
    }

    pub fn joint_count(&self) -> usize {
        self.rest_offsets.len()
    }

    pub fn shape_dim(&self) -> usize {
        self.shape_dim
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn rest_offsets(&self) -> &[Vec3] {
        &self.rest_offsets
    }

    pub fn shape_blend(&self, joint: usize) -> &Matrix3xX<f64> {
        &self.shape_blend[joint]
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Bones as `(parent, child)` pairs; bone `b` ends at joint `b + 1`.
    pub fn bones(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (1..self.joint_count()).map(move |c| (self.parents[c].unwrap(), c))
    }

    /// Per-joint offsets from the parent (absolute for the root) at shape `beta`.
    pub fn bone_offsets(&self, beta: &ShapeParams) -> Result<Vec<Vec3>> {
        self.check_shape(beta)?;
        Ok(self
            .rest_offsets
            .iter()
            .zip(&self.shape_blend)
            .map(|(rest, blend)| rest + blend * &beta.0)
            .collect())
    }

    /// Canonical (rest-pose) joint positions for shape `beta`.
    pub fn joint_regress(&self, beta: &ShapeParams) -> Result<Vec<Vec3>> {
        let offsets = self.bone_offsets(beta)?;
        let mut joints: Vec<Vec3> = Vec::with_capacity(offsets.len());
        for (i, o) in offsets.iter().enumerate() {
            let base = self.parents[i].map_or_else(Vec3::zeros, |p| joints[p]);
            joints.push(base + o);
        }
        Ok(joints)
    }

    /// World-frame joint positions for pose `theta`, shape `beta` and root translation `t`.
    pub fn forward_kinematics(&self, theta: &PoseParams, beta: &ShapeParams, t: &Translation) -> Result<Vec<Vec3>> {
        self.check_pose(theta)?;
        let offsets = self.bone_offsets(beta)?;
        Ok(self.pose_offsets(theta, &offsets, &t.0).positions)
    }

    /// Poses precomputed bone offsets, keeping the global rotations for derivatives.
    pub fn pose_offsets(&self, theta: &PoseParams, offsets: &[Vec3], t: &Vec3) -> Posed {
        let j = self.joint_count();
        let mut positions = Vec::with_capacity(j);
        let mut global = Vec::with_capacity(j);
        for i in 0..j {
            let local = rodrigues(&theta.0[i]);
            match self.parents[i] {
                None => {
                    positions.push(offsets[i] + t);
                    global.push(local);
                }
                Some(p) => {
                    let gp: Mat3 = global[p];
                    positions.push(positions[p] + gp * offsets[i]);
                    global.push(gp * local);
                }
            }
        }
        Posed { positions, global }
    }

    pub fn check_shape(&self, beta: &ShapeParams) -> Result<()> {
        if beta.0.len() != self.shape_dim {
            return Err(Error::DimensionMismatch { what: "shape", expected: self.shape_dim, found: beta.0.len() });
        }
        Ok(())
    }

    pub fn check_pose(&self, theta: &PoseParams) -> Result<()> {
        if theta.0.len() != self.joint_count() {
            return Err(Error::DimensionMismatch { what: "pose", expected: self.joint_count(), found: theta.0.len() });
        }
        Ok(())
    }

    /// Default 24-joint tree with SMPL-like topology and proportions.
    ///
    /// Coordinates: +x toward the subject's left, +y up, +z forward; the rest
    /// pose is a T-pose standing on `y = 0`. Shape coefficient 0 scales every
    /// bone, coefficient 1 scales lateral extent, the rest are fixed
    /// pseudo-random directions scaled by bone length.
    pub fn smpl_like() -> Self {
        const JOINTS: [(&str, usize, [f64; 3]); 24] = [
            ("pelvis", usize::MAX, [0.0, 0.93, 0.0]),
            ("left_hip", 0, [0.059, -0.082, -0.018]),
            ("right_hip", 0, [-0.060, -0.091, -0.014]),
            ("spine1", 0, [0.004, 0.124, -0.038]),
            ("left_knee", 1, [0.043, -0.386, 0.008]),
            ("right_knee", 2, [-0.043, -0.383, -0.005]),
            ("spine2", 3, [0.004, 0.138, 0.027]),
            ("left_ankle", 4, [-0.015, -0.427, -0.037]),
            ("right_ankle", 5, [0.019, -0.423, -0.035]),
            ("spine3", 6, [-0.002, 0.056, 0.003]),
            ("left_foot", 7, [0.041, -0.060, 0.122]),
            ("right_foot", 8, [-0.035, -0.063, 0.130]),
            ("neck", 9, [-0.013, 0.212, -0.033]),
            ("left_collar", 9, [0.072, 0.120, -0.019]),
            ("right_collar", 9, [-0.083, 0.119, -0.023]),
            ("head", 12, [0.010, 0.089, 0.050]),
            ("left_shoulder", 13, [0.123, 0.045, -0.019]),
            ("right_shoulder", 14, [-0.114, 0.046, -0.008]),
            ("left_elbow", 16, [0.255, -0.013, -0.027]),
            ("right_elbow", 17, [-0.260, -0.014, -0.021]),
            ("left_wrist", 18, [0.266, 0.013, -0.007]),
            ("right_wrist", 19, [-0.269, 0.007, -0.006]),
            ("left_hand", 20, [0.087, -0.011, -0.016]),
            ("right_hand", 21, [-0.088, -0.009, -0.010]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0d1);
        let mut parents = Vec::new();
        let mut offsets = Vec::new();
        let mut blends = Vec::new();
        let mut names = Vec::new();
        for (i, (name, parent, off)) in JOINTS.iter().enumerate() {
            let o = Vec3::from(*off);
            let mut blend = Matrix3xX::zeros(SHAPE_DIM);
            blend.set_column(0, &(o * 0.02));
            if i > 0 {
                parents.push(*parent);
                blend.set_column(1, &Vec3::new(0.015 * o.x, 0.0, 0.0));
                for k in 2..SHAPE_DIM {
                    let dir = loop {
                        let v = Vec3::new(
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                            rng.random_range(-1.0..1.0),
                        );
                        let n = v.norm();
                        if n > 0.1 && n <= 1.0 {
                            break v / n;
                        }
                    };
                    blend.set_column(k, &(dir * 0.004 * o.norm()));
                }
            }
            offsets.push(o);
            blends.push(blend);
            names.push((*name).to_string());
        }
        Self::new(&parents, offsets, blends, names).expect("built-in tree is valid")
    }

    pub fn to_file(&self) -> TreeFile {
        TreeFile {
            format: TREE_FORMAT.into(),
            version: 1,
            joint_count: self.joint_count(),
            parents: self.parents.iter().skip(1).map(|p| p.unwrap()).collect(),
            rest_offsets: self.rest_offsets.iter().map(|o| [o.x, o.y, o.z]).collect(),
            shape_blend: self
                .shape_blend
                .iter()
                .map(|b| [0, 1, 2].map(|r| b.row(r).iter().copied().collect()))
                .collect(),
            names: self.names.clone(),
        }
    }

    pub fn from_file(file: &TreeFile) -> Result<Self> {
        if file.format != TREE_FORMAT {
            return Err(Error::Format(format!("expected `{TREE_FORMAT}`, found `{}`", file.format)));
        }
        if file.rest_offsets.len() != file.joint_count {
            return Err(Error::DimensionMismatch {
                what: "rest_offsets",
                expected: file.joint_count,
                found: file.rest_offsets.len(),
            });
        }
        let blends = file
            .shape_blend
            .iter()
            .map(|rows| {
                let k = rows[0].len();
                if rows.iter().any(|r| r.len() != k) {
                    return Err(Error::InvalidTree("ragged shape_blend rows".into()));
                }
                Ok(Matrix3xX::from_fn(k, |r, c| rows[r][c]))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(
            &file.parents,
            file.rest_offsets.iter().map(|o| Vec3::from(*o)).collect(),
            blends,
            file.names.clone(),
        )
    }
}

/// Output of posing: world positions and global joint rotations.
#[derive(Debug, Clone)]
pub struct Posed {
    pub positions: Vec<Vec3>,
    pub global: Vec<Mat3>,
}

/// Per-joint axis-angle rotations, radians. Each norm is kept below `2π`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseParams(pub Vec<Vec3>);

impl PoseParams {
    pub fn new(theta: Vec<Vec3>) -> Result<Self> {
        if theta.iter().any(|w| !w.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("pose".into()));
        }
        Ok(Self(theta.iter().map(canonicalize).collect()))
    }

    pub fn zeros(joints: usize) -> Self {
        Self(vec![Vec3::zeros(); joints])
    }

    /// Builds from a flat `3J` slice.
    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() % 3 != 0 {
            return Err(Error::InvalidArgument(format!("pose length {} is not a multiple of 3", flat.len())));
        }
        Self::new(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|w| [w.x, w.y, w.z]).collect()
    }

    pub fn joints(&self) -> usize {
        self.0.len()
    }
}

/// Shape coefficients, each within `±SHAPE_BOUND`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeParams(pub DVector<f64>);

impl ShapeParams {
    pub fn new(beta: Vec<f64>) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::NonFinite("shape".into()));
        }
        if let Some(b) = beta.iter().find(|b| b.abs() > SHAPE_BOUND) {
            return Err(Error::InvalidArgument(format!("shape coefficient {b} exceeds ±{SHAPE_BOUND}")));
        }
        Ok(Self(DVector::from_vec(beta)))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

/// Root translation in world coordinates, meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Translation(pub Vec3);

impl Translation {
    pub fn new(t: Vec3) -> Result<Self> {
        if !t.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("translation".into()));
        }
        Ok(Self(t))
    }

    pub fn zero() -> Self {
        Self(Vec3::zeros())
    }
}

impl Serialize for PoseParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for PoseParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        PoseParams::new(Vec::<Vec3>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl Serialize for ShapeParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.as_slice().serialize(s)
    }
}

impl<'de> Deserialize<'de> for ShapeParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        ShapeParams::new(Vec::<f64>::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

impl Serialize for Translation {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.0.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Translation {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Translation::new(Vec3::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

/// Names of the keypoints appended by [`derive_extra_keypoints`].
pub const EXTRA_KEYPOINT_NAMES: [&str; 2] = ["head_top", "nose"];

// Affine weights (summing to one) over named joints.
const EXTRA_KEYPOINT_WEIGHTS: [&[(&str, f64)]; 2] = [
    &[("head", 2.3), ("neck", -1.3)],
    &[("head", 1.25), ("neck", -0.5), ("spine3", 0.25)],
];

/// Appends head-top and nose, each a fixed affine combination of named joints.
pub fn derive_extra_keypoints(joints: &[Vec3], tree: &KinematicTree) -> Result<Vec<Vec3>> {
    if joints.len() != tree.joint_count() {
        return Err(Error::DimensionMismatch { what: "keypoints", expected: tree.joint_count(), found: joints.len() });
    }
    let mut out = joints.to_vec();
    for weights in EXTRA_KEYPOINT_WEIGHTS {
        let mut p = Vec3::zeros();
        for (name, w) in weights {
            let idx = tree.joint_index(name).ok_or_else(|| Error::MissingJoint((*name).to_string()))?;
            p += joints[idx] * *w;
        }
        out.push(p);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Matrix4;
    use rand::Rng;

    fn random_shape(rng: &mut ChaCha8Rng) -> ShapeParams {
        ShapeParams::new((0..SHAPE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng, j: usize) -> PoseParams {
        PoseParams::new(
            (0..j)
                .map(|_| Vec3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)))
                .collect(),
        )
        .unwrap()
    }

    // Walks the ancestor chain of each joint independently.
    fn chain_walk_oracle(tree: &KinematicTree, beta: &ShapeParams) -> Vec<Vec3> {
        (0..tree.joint_count())
            .map(|i| {
                let mut p = Vec3::zeros();
                let mut cur = Some(i);
                while let Some(c) = cur {
                    let blend = tree.shape_blend(c);
                    let mut off = tree.rest_offsets()[c];
                    for k in 0..beta.0.len() {
                        for r in 0..3 {
                            off[r] += blend[(r, k)] * beta.0[k];
                        }
                    }
                    p += off;
                    cur = tree.parent(c);
                }
                p
            })
            .collect()
    }

    // Explicit 4x4 homogeneous transforms, each joint composed from the root down.
    fn matrix_chain_oracle(tree: &KinematicTree, theta: &PoseParams, beta: &ShapeParams, t: &Vec3) -> Vec<Vec3> {
        let rest = chain_walk_oracle(tree, beta);
        let homog = |r: Mat3, p: Vec3| {
            let mut m = Matrix4::identity();
            m.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
            m.fixed_view_mut::<3, 1>(0, 3).copy_from(&p);
            m
        };
        (0..tree.joint_count())
            .map(|i| {
                let mut chain = vec![i];
                while let Some(p) = tree.parent(*chain.last().unwrap()) {
                    chain.push(p);
                }
                chain.reverse();
                let mut g = homog(Mat3::identity(), *t);
                let mut prev = Vec3::zeros();
                for &c in &chain {
                    let rel = rest[c] - prev;
                    g *= homog(rodrigues(&theta.0[c]), rel);
                    prev = rest[c];
                }
                Vec3::new(g[(0, 3)], g[(1, 3)], g[(2, 3)])
            })
            .collect()
    }

    #[test]
    fn zero_shape_gives_accumulated_rest_offsets() {
        let tree = KinematicTree::smpl_like();
        let joints = tree.joint_regress(&ShapeParams::zeros(SHAPE_DIM)).unwrap();
        assert_relative_eq!(joints[0], Vec3::new(0.0, 0.93, 0.0));
        let knee = tree.rest_offsets()[0] + tree.rest_offsets()[1] + tree.rest_offsets()[4];
        assert_relative_eq!(joints[4], knee, epsilon = 1e-15);
    }

    #[test]
    fn joint_regress_is_linear_in_shape() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = ShapeParams::new((0..SHAPE_DIM).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let double = ShapeParams(&beta.0 * 2.0);
        let j0 = tree.joint_regress(&ShapeParams::zeros(SHAPE_DIM)).unwrap();
        let j1 = tree.joint_regress(&beta).unwrap();
        let j2 = tree.joint_regress(&double).unwrap();
        for i in 0..tree.joint_count() {
            assert_relative_eq!(j2[i] - j0[i], 2.0 * (j1[i] - j0[i]), epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_regress_affine_on_collinear_samples() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_shape(&mut rng);
        let b = random_shape(&mut rng);
        let mid = ShapeParams((&a.0 + &b.0) * 0.5);
        let ja = tree.joint_regress(&a).unwrap();
        let jb = tree.joint_regress(&b).unwrap();
        let jm = tree.joint_regress(&mid).unwrap();
        for i in 0..tree.joint_count() {
            assert_relative_eq!(jm[i], (ja[i] + jb[i]) * 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn joint_regress_matches_chain_walk() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let beta = random_shape(&mut rng);
            let fast = tree.joint_regress(&beta).unwrap();
            let slow = chain_walk_oracle(&tree, &beta);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs().max() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_dimension_mismatch_is_rejected() {
        let tree = KinematicTree::smpl_like();
        assert!(matches!(
            tree.joint_regress(&ShapeParams::zeros(3)),
            Err(Error::DimensionMismatch { what: "shape", .. })
        ));
    }

    #[test]
    fn identity_pose_reproduces_rest_joints() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let beta = random_shape(&mut rng);
        let posed = tree.forward_kinematics(&PoseParams::zeros(24), &beta, &Translation::zero()).unwrap();
        assert_eq!(posed, tree.joint_regress(&beta).unwrap());
    }

    #[test]
    fn root_rotation_is_global_rigid_motion() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta = random_shape(&mut rng);
        let rest = tree.joint_regress(&beta).unwrap();
        let aa = Vec3::new(0.3, -1.2, 0.8);
        let t = Vec3::new(1.0, -2.0, 0.5);
        let mut theta = PoseParams::zeros(24);
        theta.0[0] = aa;
        let posed = tree.forward_kinematics(&theta, &beta, &Translation(t)).unwrap();
        let r = rodrigues(&aa);
        for i in 0..24 {
            let expected = r * (rest[i] - rest[0]) + rest[0] + t;
            assert!((posed[i] - expected).abs().max() < 1e-9);
        }
    }

    #[test]
    fn forward_kinematics_matches_matrix_chain() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let beta = random_shape(&mut rng);
            let theta = random_pose(&mut rng, 24);
            let t = Vec3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
            let fast = tree.forward_kinematics(&theta, &beta, &Translation(t)).unwrap();
            let slow = matrix_chain_oracle(&tree, &theta, &beta, &t);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs().max() < 1e-10);
            }
        }
    }

    #[test]
    fn forward_kinematics_preserves_bone_lengths() {
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let beta = random_shape(&mut rng);
            let theta = random_pose(&mut rng, 24);
            let rest = tree.joint_regress(&beta).unwrap();
            let posed = tree.forward_kinematics(&theta, &beta, &Translation(Vec3::new(3.0, 0.0, -1.0))).unwrap();
            for (p, c) in tree.bones() {
                let l0 = (rest[c] - rest[p]).norm();
                let l1 = (posed[c] - posed[p]).norm();
                assert!((l0 - l1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotated_root_with_compensating_translation_is_rigid() {
        // Rotating the root about the world origin: R applied to every keypoint.
        let tree = KinematicTree::smpl_like();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let beta = random_shape(&mut rng);
        let mut theta = random_pose(&mut rng, 24);
        theta.0[0] = Vec3::zeros();
        let t = Vec3::new(0.4, 0.1, -0.3);
        let base = tree.forward_kinematics(&theta, &beta, &Translation(t)).unwrap();
        let rot = Vec3::new(0.0, 0.9, 0.2);
        let r = rodrigues(&rot);
        let root_rest = tree.joint_regress(&beta).unwrap()[0];
        let mut rotated = theta.clone();
        rotated.0[0] = rot;
        let t2 = r * (root_rest + t) - root_rest;
        let moved = tree.forward_kinematics(&rotated, &beta, &Translation(t2)).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            assert!((r * a - b).abs().max() < 1e-9);
        }
    }

    #[test]
    fn extra_keypoints_follow_construction() {
        let tree = KinematicTree::smpl_like();
        let joints = tree.joint_regress(&ShapeParams::zeros(SHAPE_DIM)).unwrap();
        let all = derive_extra_keypoints(&joints, &tree).unwrap();
        assert_eq!(all.len(), 26);
        let (head, neck) = (joints[15], joints[12]);
        assert_relative_eq!(all[24], head + 1.3 * (head - neck), epsilon = 1e-15);
        assert!((all[24] - head).cross(&(head - neck)).norm() < 1e-12);
    }

    #[test]
    fn extra_keypoints_degenerate_head_on_neck() {
        let tree = KinematicTree::smpl_like();
        let mut joints = tree.joint_regress(&ShapeParams::zeros(SHAPE_DIM)).unwrap();
        joints[15] = joints[12];
        let all = derive_extra_keypoints(&joints, &tree).unwrap();
        assert_relative_eq!(all[24], joints[15], epsilon = 1e-15);
    }

    #[test]
    fn extra_keypoints_require_named_joints() {
        let tree = KinematicTree::new(
            &[0],
            vec![Vec3::zeros(), Vec3::new(0.0, 1.0, 0.0)],
            vec![Matrix3xX::zeros(1); 2],
            vec!["a".into(), "b".into()],
        )
        .unwrap();
        let err = derive_extra_keypoints(&[Vec3::zeros(), Vec3::y()], &tree).unwrap_err();
        assert!(matches!(err, Error::MissingJoint(n) if n == "head"));
    }

    #[test]
    fn tree_validation() {
        let blend = vec![Matrix3xX::zeros(1); 3];
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let offs = vec![Vec3::zeros(), Vec3::x(), Vec3::y()];
        assert!(KinematicTree::new(&[0, 2], offs.clone(), blend.clone(), names.clone()).is_err());
        assert!(KinematicTree::new(&[0, 1], vec![Vec3::zeros(), Vec3::zeros(), Vec3::y()], blend.clone(), names.clone())
            .is_err());
        assert!(KinematicTree::new(&[0], offs.clone(), blend.clone(), names.clone()).is_err());
        assert!(KinematicTree::new(&[0, 1], offs, blend, names).is_ok());
    }

    #[test]
    fn tree_file_round_trip() {
        let tree = KinematicTree::smpl_like();
        let text = serde_json::to_string(&tree.to_file()).unwrap();
        let back = KinematicTree::from_file(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn pose_is_canonicalized() {
        let p = PoseParams::new(vec![Vec3::new(0.0, 0.0, 7.0)]).unwrap();
        assert!(p.0[0].norm() < std::f64::consts::TAU);
        assert!(PoseParams::new(vec![Vec3::new(f64::NAN, 0.0, 0.0)]).is_err());
    }

    #[test]
    fn shape_bound_enforced() {
        assert!(ShapeParams::new(vec![5.5]).is_err());
        assert!(ShapeParams::new(vec![-5.0, 5.0]).is_ok());
    }
}

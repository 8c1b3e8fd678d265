//! Closed-form starting pose from observed bone directions.

use crate::body::KinematicTree;
use crate::rotation::log_map;
use crate::{Mat3, Vec3};

// Smallest rotation taking unit `a` onto unit `b`.
fn min_rotation(a: &Vec3, b: &Vec3) -> Mat3 {
    let v = a.cross(b);
    let s = v.norm();
    let c = a.dot(b);
    if s < 1e-12 {
        if c > 0.0 {
            return Mat3::identity();
        }
        // Half turn about any axis orthogonal to `a`.
        let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let axis = a.cross(&helper).normalize();
        return axis * axis.transpose() * 2.0 - Mat3::identity();
    }
    crate::rotation::rodrigues(&(v / s * s.atan2(c)))
}

// Proper rotation best mapping directions `from[i]` onto `to[i]`, or `None` when rank-deficient.
fn kabsch(from: &[Vec3], to: &[Vec3]) -> Option<Mat3> {
    let mut cov = Mat3::zeros();
    for (a, b) in from.iter().zip(to) {
        cov += b * a.transpose();
    }
    let svd = cov.svd(true, true);
    let mut sv = svd.singular_values;
    sv.as_mut_slice().sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-9 * sv[0].max(1e-300) {
        return None;
    }
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        let smallest = svd.singular_values.imin();
        d[(smallest, smallest)] = -1.0;
    }
    Some(u * d * vt)
}

/// Rotations and translation that point every bone at its observed child.
///
/// Joints are visited parent first. A joint with two or more usable children
/// gets the best aligning rotation; one child gets the smallest rotation onto
/// its direction; leaves and unobserved joints inherit their parent's rotation.
pub fn initial_pose(tree: &KinematicTree, offsets: &[Vec3], target: &[Vec3], mask: &[bool]) -> (Vec<Vec3>, Vec3) {
    let j = tree.joint_count();
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); j];
    for c in 1..j {
        if let Some(p) = tree.parent(c) {
            children[p].push(c);
        }
    }
    let mut global = vec![Mat3::identity(); j];
    let mut theta = vec![Vec3::zeros(); j];
    for a in 0..j {
        let parent_rot = tree.parent(a).map_or_else(Mat3::identity, |p| global[p]);
        let mut from = Vec::new();
        let mut to = Vec::new();
        if mask[a] {
            for &c in &children[a] {
                let d = target[c] - target[a];
                if mask[c] && d.norm() > 1e-9 && offsets[c].norm() > 1e-9 {
                    from.push(parent_rot * offsets[c].normalize());
                    to.push(d.normalize());
                }
            }
        }
        let extra = match from.len() {
            0 => Mat3::identity(),
            1 => min_rotation(&from[0], &to[0]),
            _ => kabsch(&from, &to).unwrap_or_else(|| min_rotation(&from[0], &to[0])),
        };
        global[a] = extra * parent_rot;
        theta[a] = log_map(&(parent_rot.transpose() * global[a]));
    }
    let t = if mask[0] {
        target[0] - offsets[0]
    } else {
        // Average offset between the posed initial guess and the usable targets.
        let posed = tree
            .pose_offsets(&crate::body::PoseParams(theta.clone()), offsets, &Vec3::zeros())
            .positions;
        let n = mask.iter().filter(|m| **m).count() as f64;
        posed.iter().zip(target).zip(mask).filter(|(_, m)| **m).map(|((p, x), _)| x - p).sum::<Vec3>() / n
    };
    (theta, t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body::{PoseParams, ShapeParams, Translation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn min_rotation_maps_direction() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
            let b = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
            assert!((min_rotation(&a, &b) * a - b).norm() < 1e-12);
            assert!((min_rotation(&a, &-a) * a + a).norm() < 1e-12);
        }
    }

    #[test]
    fn noiseless_targets_are_reproduced() {
        // Twist may differ, but every joint lands on its target when the shape is right.
        let tree = KinematicTree::smpl_like();
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let theta: Vec<Vec3> =
            (0..24).map(|_| Vec3::new(r.random_range(-0.5..0.5), r.random_range(-0.5..0.5), r.random_range(-0.5..0.5))).collect();
        let t = Vec3::new(1.0, 0.9, -2.0);
        let x = tree.forward_kinematics(&PoseParams(theta.clone()), &ShapeParams::zeros(10), &Translation(t)).unwrap();
        let offsets = tree.bone_offsets(&ShapeParams::zeros(10)).unwrap();
        let (init, t0) = initial_pose(&tree, &offsets, &x, &[true; 24]);
        assert!((t0 - t).norm() < 1e-12);
        let posed = tree.pose_offsets(&PoseParams(init), &offsets, &t0).positions;
        for (p, q) in posed.iter().zip(&x) {
            assert!((p - q).norm() < 1e-9);
        }
    }
}

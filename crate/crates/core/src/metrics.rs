//! Keypoint error metrics.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{Mat3, Vec3};

/// Similarity transform `x -> scale * rotation * x + translation` and the aligned points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub scale: f64,
    pub aligned: Vec<Vec3>,
}

impl AlignmentResult {
    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }
}

fn check_pair(pred: &[Vec3], gt: &[Vec3]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::DimensionMismatch { what: "joints", expected: gt.len(), found: pred.len() });
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("no joints".into()));
    }
    Ok(())
}

/// Mean per-joint position error in millimetres; inputs in metres.
pub fn mpjpe(pred: &[Vec3], gt: &[Vec3]) -> Result<f64> {
    check_pair(pred, gt)?;
    let s: f64 = pred.iter().zip(gt).map(|(p, g)| (p - g).norm()).sum();
    Ok(s / pred.len() as f64 * 1000.0)
}

fn centroid(p: &[Vec3]) -> Vec3 {
    p.iter().sum::<Vec3>() / p.len() as f64
}

/// Least-squares similarity (or rigid, when `with_scale` is false) mapping `pred` onto `gt`.
pub fn procrustes_align(pred: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<AlignmentResult> {
    check_pair(pred, gt)?;
    if pred.len() < 3 {
        return Err(Error::Degenerate(format!("alignment needs at least 3 joints, got {}", pred.len())));
    }
    let (mp, mg) = (centroid(pred), centroid(gt));
    let mut cov = Matrix3::zeros();
    let mut var_pred = 0.0;
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (p - mp, g - mg);
        cov += b * a.transpose();
        var_pred += a.norm_squared();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut sv = svd.singular_values;
    // Sort descending to find the rank reliably.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sv[j].total_cmp(&sv[i]));
    let tol = 1e-12 * sv[order[0]].max(1e-300);
    if sv[order[1]] <= tol || var_pred <= 0.0 {
        return Err(Error::Degenerate("joints are collinear or coincident".into()));
    }
    let mut d = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(order[2], order[2])] = -1.0;
        sv[order[2]] = -sv[order[2]];
    }
    let rotation = u * d * vt;
    let scale = if with_scale { sv.sum() / var_pred } else { 1.0 };
    let translation = mg - rotation * mp * scale;
    let aligned = pred.iter().map(|p| rotation * p * scale + translation).collect();
    Ok(AlignmentResult { rotation, translation, scale, aligned })
}

/// MPJPE after similarity alignment, millimetres.
pub fn pa_mpjpe(pred: &[Vec3], gt: &[Vec3], with_scale: bool) -> Result<f64> {
    let al = procrustes_align(pred, gt, with_scale)?;
    mpjpe(&al.aligned, gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::rodrigues;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(r: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0))).collect()
    }

    fn rand_rot(r: &mut ChaCha8Rng) -> Mat3 {
        let axis = Vec3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)).normalize();
        rodrigues(&(axis * r.random_range(0.0..3.1)))
    }

    fn sse(al: &[Vec3], gt: &[Vec3]) -> f64 {
        al.iter().zip(gt).map(|(a, b)| (a - b).norm_squared()).sum()
    }

    #[test]
    fn mpjpe_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let gt = cloud(&mut r, 17);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let off: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(0.003, 0.004, 0.0)).collect();
        assert_relative_eq!(mpjpe(&off, &gt).unwrap(), 5.0, epsilon = 1e-9);
        let pred = cloud(&mut r, 17);
        let mut oracle = 0.0;
        for j in 0..17 {
            let d = pred[j] - gt[j];
            oracle += (d.x * d.x + d.y * d.y + d.z * d.z).sqrt() * 1000.0;
        }
        assert_relative_eq!(mpjpe(&pred, &gt).unwrap(), oracle / 17.0, epsilon = 1e-9);
        assert!(mpjpe(&pred[..3], &gt).is_err());
    }

    #[test]
    fn identity_alignment() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let gt = cloud(&mut r, 10);
        let al = procrustes_align(&gt, &gt, true).unwrap();
        assert_relative_eq!(al.rotation, Mat3::identity(), epsilon = 1e-12);
        assert!(al.translation.norm() < 1e-12);
        assert_relative_eq!(al.scale, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn recovers_rigid_transform() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gt = cloud(&mut r, 12);
            let rot = rand_rot(&mut r);
            let t = Vec3::new(0.5, -2.0, 3.0);
            let pred: Vec<Vec3> = gt.iter().map(|p| rot * p + t).collect();
            for with_scale in [true, false] {
                let al = procrustes_align(&pred, &gt, with_scale).unwrap();
                assert!(sse(&al.aligned, &gt).sqrt() < 1e-9);
                assert_relative_eq!(al.rotation, rot.transpose(), epsilon = 1e-9);
                assert_relative_eq!(al.translation, -(rot.transpose() * t), epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn never_reflects() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let gt = cloud(&mut r, 8);
        let mirrored: Vec<Vec3> = gt.iter().map(|p| Vec3::new(-p.x, p.y, p.z)).collect();
        let al = procrustes_align(&mirrored, &gt, true).unwrap();
        assert_relative_eq!(al.rotation.determinant(), 1.0, epsilon = 1e-12);
        assert!(al.scale > 0.0);
    }

    #[test]
    fn beats_random_similarity_transforms() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let gt = cloud(&mut r, 15);
        let pred = cloud(&mut r, 15);
        let best = sse(&procrustes_align(&pred, &gt, true).unwrap().aligned, &gt);
        let (mp, mg) = (centroid(&pred), centroid(&gt));
        for _ in 0..10_000 {
            let rot = rand_rot(&mut r);
            let s = r.random_range(0.1..3.0);
            let t = mg - rot * mp * s + Vec3::new(r.random_range(-0.2..0.2), r.random_range(-0.2..0.2), r.random_range(-0.2..0.2));
            let cand: Vec<Vec3> = pred.iter().map(|p| rot * p * s + t).collect();
            assert!(best <= sse(&cand, &gt) + 1e-12);
        }
    }

    #[test]
    fn pa_mpjpe_examples() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let gt = cloud(&mut r, 14);
        let shifted: Vec<Vec3> = gt.iter().map(|p| p + Vec3::new(0.003, 0.0, 0.0)).collect();
        assert_relative_eq!(mpjpe(&shifted, &gt).unwrap(), 3.0, epsilon = 1e-9);
        assert!(pa_mpjpe(&shifted, &gt, true).unwrap() < 1e-9);
        assert!(pa_mpjpe(&gt, &gt, true).unwrap() < 1e-9);
        let pred = cloud(&mut r, 14);
        let al = procrustes_align(&pred, &gt, true).unwrap();
        let composed = mpjpe(&pred.iter().map(|p| al.apply(p)).collect::<Vec<_>>(), &gt).unwrap();
        assert_relative_eq!(pa_mpjpe(&pred, &gt, true).unwrap(), composed, epsilon = 1e-9);
    }

    #[test]
    fn degenerate_inputs() {
        let line: Vec<Vec3> = (0..5).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert!(matches!(procrustes_align(&line, &line, true), Err(Error::Degenerate(_))));
        let two = vec![Vec3::zeros(), Vec3::x()];
        assert!(matches!(procrustes_align(&two, &two, true), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn pa_mpjpe_similarity_invariant(seed in any::<u64>(), s in 0.2f64..5.0) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = cloud(&mut r, 17);
            let pred = cloud(&mut r, 17);
            let rot = rand_rot(&mut r);
            let t = Vec3::new(r.random_range(-3.0..3.0), r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
            let moved: Vec<Vec3> = pred.iter().map(|p| rot * p * s + t).collect();
            let a = pa_mpjpe(&pred, &gt, true).unwrap();
            let b = pa_mpjpe(&moved, &gt, true).unwrap();
            prop_assert!((a - b).abs() < 1e-9);
            prop_assert!(a <= mpjpe(&pred, &gt).unwrap() + 1e-9);
        }

        #[test]
        fn alignment_is_idempotent(seed in any::<u64>()) {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let gt = cloud(&mut r, 10);
            let pred = cloud(&mut r, 10);
            let once = procrustes_align(&pred, &gt, true).unwrap();
            let twice = procrustes_align(&once.aligned, &gt, true).unwrap();
            prop_assert!((twice.rotation - Mat3::identity()).amax() < 1e-9);
            prop_assert!((twice.scale - 1.0).abs() < 1e-9);
            prop_assert!(twice.translation.norm() < 1e-9);
        }
    }
}

//! SO(3) helpers on axis-angle vectors.
//!
//! Everything here works on plain `Vector3`/`Matrix3` so the body model and the
//! fitter can share the exponential/log maps and their Jacobians.

use std::f64::consts::{PI, TAU};

use crate::{Mat3, Vec3};

const SMALL_ANGLE: f64 = 1e-6;

/// Cross-product matrix: `skew(a) * b == a.cross(&b)`.
#[inline]
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues' formula: axis-angle vector to rotation matrix.
///
/// The zero vector maps to the identity. Below a tiny angle the series
/// expansion is used so the result stays orthonormal to machine precision.
pub fn rodrigues(aa: &Vec3) -> Mat3 {
    let theta2 = aa.norm_squared();
    let k = skew(aa);
    if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        return Mat3::identity() + k + 0.5 * k * k;
    }
    let theta = theta2.sqrt();
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Mat3::identity() + a * k + b * k * k
}

/// Logarithm map: rotation matrix to the axis-angle vector with angle in `[0, π]`.
pub fn log_map(r: &Mat3) -> Vec3 {
    let cos = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let vee = Vec3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    let theta = cos.acos();
    if theta < 1e-4 {
        // theta / (2 sin theta) ~ 1/2 + theta^2 / 12
        return vee * (0.5 + theta * theta / 12.0);
    }
    if PI - theta > 1e-4 {
        return vee * (theta / (2.0 * theta.sin()));
    }
    // Near a half turn the antisymmetric part vanishes; recover the axis from
    // the symmetric part, using the sign of the residual antisymmetric part.
    let b = (r + r.transpose()) * 0.5 - Mat3::identity() * cos;
    let (mut best, mut best_norm) = (0, -1.0);
    for c in 0..3 {
        let n = b.column(c).norm();
        if n > best_norm {
            best = c;
            best_norm = n;
        }
    }
    let mut axis: Vec3 = b.column(best).into_owned() / best_norm;
    if axis.dot(&vee) < 0.0 {
        axis = -axis;
    }
    axis * theta
}

/// Geodesic angle between two rotations, in `[0, π]`.
pub fn geodesic_angle(a: &Mat3, b: &Mat3) -> f64 {
    log_map(&(a.transpose() * b)).norm()
}

/// Wraps an axis-angle vector so that its norm is below `2π`, preserving the rotation.
pub fn canonicalize(aa: &Vec3) -> Vec3 {
    let n = aa.norm();
    if n < TAU || !n.is_finite() {
        return *aa;
    }
    let wrapped = n.rem_euclid(TAU);
    aa * (wrapped / n)
}

/// Left Jacobian of SO(3): `exp(w + d) ≈ exp(Jl(w) d) exp(w)`.
pub fn left_jacobian(w: &Vec3) -> Mat3 {
    let theta2 = w.norm_squared();
    let k = skew(w);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    let a = (1.0 - theta.cos()) / theta2;
    let b = (theta - theta.sin()) / (theta2 * theta);
    Mat3::identity() + a * k + b * k * k
}

/// Right Jacobian of SO(3): `exp(w + d) ≈ exp(w) exp(Jr(w) d)`.
#[inline]
pub fn right_jacobian(w: &Vec3) -> Mat3 {
    left_jacobian(&-w)
}

/// Inverse of the right Jacobian: `log(exp(r) exp(e)) ≈ r + Jr⁻¹(r) e`.
pub fn right_jacobian_inv(r: &Vec3) -> Mat3 {
    let theta2 = r.norm_squared();
    let k = skew(r);
    if theta2 < 1e-10 {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let theta = theta2.sqrt();
    let c = 1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + c * k * k
}

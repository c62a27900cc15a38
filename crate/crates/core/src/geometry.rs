//! Rotation-group and projector primitives shared by the simulator and the
//! observers.
//!
//! Rotations are plain `Matrix3<f64>` values kept orthonormal by explicit
//! renormalization ([`project_to_so3`]) after each integration step; unit
//! vectors use `nalgebra`'s `Unit` wrapper.

use nalgebra::{Matrix3, UnitVector3, Vector3};

/// Below this rotation-vector norm [`exp_so3`] switches to a second-order
/// series expansion of the Rodrigues coefficients.
pub const SMALL_ANGLE_THRESHOLD: f64 = 1e-6;

/// Skew-symmetric matrix `[v]x` such that `[v]x w = v x w`.
///
/// ```text
///         |  0  -v3   v2 |
/// [v]x =  |  v3   0  -v1 |
///         | -v2   v1   0 |
/// ```
#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Vector extraction of the antisymmetric part of a matrix:
/// `psi(A) = 1/2 [a32 - a23, a13 - a31, a21 - a12]^T`.
///
/// Satisfies `tr(A^T [u]x) = 2 u . psi(A)` for all `u`, `psi(A) = -psi(A^T)`,
/// and `psi(skew(u)) = u`.
#[inline]
pub fn psi(a: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(
        a[(2, 1)] - a[(1, 2)],
        a[(0, 2)] - a[(2, 0)],
        a[(1, 0)] - a[(0, 1)],
    )
}

/// Orthogonal projector `I - x x^T` onto the plane orthogonal to the unit
/// vector `x`.
///
/// Symmetric, positive semidefinite, idempotent, and equivariant:
/// `R proj(x) R^T = proj(R x)` for any rotation `R`.
#[inline]
pub fn proj(x: &UnitVector3<f64>) -> Matrix3<f64> {
    Matrix3::identity() - x.as_ref() * x.transpose()
}

/// Rotation-matrix exponential of the rotation vector `u` (Rodrigues form).
///
/// For `theta = |u|` above [`SMALL_ANGLE_THRESHOLD`]:
///
/// ```text
/// exp([u]x) = I + sin(theta)/theta [u]x + (1 - cos(theta))/theta^2 [u]x^2
/// ```
///
/// and a second-order series for the two coefficients below it.
pub fn exp_so3(u: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = u.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE_THRESHOLD {
        // sin(t)/t = 1 - t^2/6 + O(t^4), (1-cos(t))/t^2 = 1/2 - t^2/24 + O(t^4)
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let s = skew(u);
    Matrix3::identity() + a * s + b * (s * s)
}

/// Rotation by exactly half a turn about the unit axis `v`: `2 v v^T - I`.
///
/// Algebraically equal to `exp_so3(pi * v)`; this closed form avoids the
/// `sin(pi)` rounding residue of the Rodrigues formula, which matters when a
/// half-turn must be an exact fixed point of an error flow.
#[inline]
pub fn half_turn(v: &UnitVector3<f64>) -> Matrix3<f64> {
    2.0 * (v.as_ref() * v.transpose()) - Matrix3::identity()
}

/// Normalized attitude distance `1/4 tr(I - R) in [0, 1]`.
///
/// Zero iff `R = I`, one iff `R` is a half-turn.
#[inline]
pub fn attitude_distance(r: &Matrix3<f64>) -> f64 {
    0.25 * (3.0 - r.trace())
}

/// Maximum entrywise deviation of `R^T R` from the identity plus the
/// deviation of `det R` from one. Zero for exact rotation matrices.
pub fn rotation_defect(r: &Matrix3<f64>) -> f64 {
    let gram = r.transpose() * r - Matrix3::identity();
    gram.amax().max((r.determinant() - 1.0).abs())
}

/// Whether `R` is orthonormal with unit determinant within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    rotation_defect(r) <= tol
}

/// Nearest rotation matrix in the Frobenius sense (polar projection via SVD,
/// with a determinant correction so the result stays in SO(3)).
pub fn project_to_so3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 matrix");
    let v_t = svd.v_t.expect("svd of 3x3 matrix");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction.
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    r
}

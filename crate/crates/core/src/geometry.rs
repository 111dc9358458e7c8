//! Rotation representations, SO(3) exp/log maps, pose algebra, and
//! covariance frame transforms.
//!
//! Conventions, fixed once for the whole crate:
//! - Quaternions are Hamilton, stored `(x, y, z, w)` and hemisphere
//!   normalized (`w >= 0`). Composition `a ⊗ b` applies `b` first.
//! - A pose `T_AB = (p_AB, q_AB)` is the transform of frame `B` with
//!   respect to frame `A`: `v_A = R_AB v_B + p_AB`.
//! - Axis-angle tangent vectors `ϑ = θ v` carry the rotation axis in their
//!   direction and the angle in their norm; the log map returns
//!   `θ ∈ [0, π]`.
//!
//! All values are immutable after construction and all operations are pure
//! functions, so everything here is freely shareable across threads.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used to validate rotation-matrix and quaternion invariants.
pub const ORTHONORMALITY_TOL: f64 = 1e-9;

/// Below this angle the exponential map switches to its Taylor expansion.
const EXP_TAYLOR_THRESHOLD: f64 = 1e-8;
/// Below this angle the log map switches to its trace-based Taylor branch.
const LOG_TAYLOR_THRESHOLD: f64 = 1e-6;
/// Within this distance of π the log map switches to the diagonal-dominant
/// axis-extraction branch.
const LOG_PI_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("matrix is not a rotation: {0}")]
    InvalidRotation(String),
    #[error("quaternion is not unit norm (|q| = {0})")]
    InvalidQuaternion(f64),
    #[error("covariance entries must be strictly positive and finite: {0:?}")]
    InvalidCovariance([f64; 3]),
}

/// A member of SO(3), guaranteed orthonormal with determinant +1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix(Matrix3::identity())
    }

    /// Validate orthonormality and determinant before accepting `m`.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeometryError> {
        let gram = m.transpose() * m;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if !ortho_err.is_finite() || ortho_err > ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "RᵀR deviates from identity by {ortho_err:.3e}"
            )));
        }
        let det_err = (m.determinant() - 1.0).abs();
        if det_err > ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidRotation(format!(
                "det deviates from +1 by {det_err:.3e}"
            )));
        }
        Ok(RotationMatrix(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        RotationMatrix(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        RotationMatrix(self.0 * other.0)
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    /// Geodesic angle between two rotations, in radians.
    pub fn angle_to(&self, other: &Self) -> f64 {
        so3_log(&self.transpose().compose(other)).norm()
    }
}

/// A Hamilton unit quaternion, hemisphere normalized so that `w >= 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuat(UnitQuaternion<f64>);

impl UnitQuat {
    pub fn identity() -> Self {
        UnitQuat(UnitQuaternion::identity())
    }

    /// Accepts `(x, y, z, w)` within `1e-9` of unit norm and canonicalizes
    /// the hemisphere. The components are stored bit-exactly so that
    /// serialization round-trips; they are not re-normalized.
    pub fn from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Result<Self, GeometryError> {
        let norm = (x * x + y * y + z * z + w * w).sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > ORTHONORMALITY_TOL {
            return Err(GeometryError::InvalidQuaternion(norm));
        }
        let q = if w < 0.0 {
            Quaternion::new(-w, -x, -y, -z)
        } else {
            Quaternion::new(w, x, y, z)
        };
        Ok(UnitQuat(UnitQuaternion::new_unchecked(q)))
    }

    /// Renormalizes and hemisphere-canonicalizes an arbitrary non-zero
    /// quaternion.
    pub(crate) fn from_quaternion(q: Quaternion<f64>) -> Self {
        let mut unit = UnitQuaternion::from_quaternion(q);
        if unit.w < 0.0 {
            unit = UnitQuaternion::new_unchecked(-unit.into_inner());
        }
        UnitQuat(unit)
    }

    pub fn xyzw(&self) -> [f64; 4] {
        [self.0.i, self.0.j, self.0.k, self.0.w]
    }

    /// Hamilton product; `self` is applied after `other`.
    pub fn compose(&self, other: &Self) -> Self {
        Self::from_quaternion((self.0 * other.0).into_inner())
    }

    pub fn inverse(&self) -> Self {
        Self::from_quaternion(self.0.conjugate().into_inner())
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }

    pub fn rotation_matrix(&self) -> RotationMatrix {
        RotationMatrix(self.0.to_rotation_matrix().into_inner())
    }

    pub fn from_rotation_matrix(r: &RotationMatrix) -> Self {
        Self::from_quaternion(
            UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(r.0))
                .into_inner(),
        )
    }

    /// Quaternion exponential of an axis-angle tangent vector. Used for
    /// multiplicative state corrections.
    pub fn from_scaled_axis(v: &Vector3<f64>) -> Self {
        Self::from_quaternion(UnitQuaternion::from_scaled_axis(*v).into_inner())
    }

    /// Geodesic angle to `other`, in radians.
    pub fn angle_to(&self, other: &Self) -> f64 {
        self.0.angle_to(&other.0)
    }

    pub fn norm(&self) -> f64 {
        self.0.as_ref().norm()
    }
}

/// Rigid transform: translation in meters plus a unit quaternion.
/// Serializes as the 7 floats `px py pz qx qy qz qw`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 7]", into = "[f64; 7]")]
pub struct Pose {
    pub translation: Vector3<f64>,
    pub rotation: UnitQuat,
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            translation: Vector3::zeros(),
            rotation: UnitQuat::identity(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: UnitQuat) -> Self {
        Pose {
            translation,
            rotation,
        }
    }

    /// `T_AC = T_AB ∘ T_BC`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            translation: self.translation + self.rotation.rotate(&other.translation),
            rotation: self.rotation.compose(&other.rotation),
        }
    }

    /// `T_BA` from `T_AB`.
    pub fn inverse(&self) -> Pose {
        let rot_inv = self.rotation.inverse();
        Pose {
            translation: -rot_inv.rotate(&self.translation),
            rotation: rot_inv,
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// Serialization order used by every file format in this crate.
    pub fn to_seven(&self) -> [f64; 7] {
        let q = self.rotation.xyzw();
        let p = self.translation;
        [p.x, p.y, p.z, q[0], q[1], q[2], q[3]]
    }

    pub fn from_seven(v: &[f64; 7]) -> Result<Self, GeometryError> {
        Ok(Pose {
            translation: Vector3::new(v[0], v[1], v[2]),
            rotation: UnitQuat::from_xyzw(v[3], v[4], v[5], v[6])?,
        })
    }
}

impl TryFrom<[f64; 7]> for Pose {
    type Error = GeometryError;
    fn try_from(v: [f64; 7]) -> Result<Self, Self::Error> {
        Pose::from_seven(&v)
    }
}

impl From<Pose> for [f64; 7] {
    fn from(p: Pose) -> Self {
        p.to_seven()
    }
}

/// Diagonal 3x3 covariance with strictly positive entries (m² or rad²).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct DiagCov3(Vector3<f64>);

impl DiagCov3 {
    pub fn new(v0: f64, v1: f64, v2: f64) -> Result<Self, GeometryError> {
        let all_valid = [v0, v1, v2].iter().all(|x| x.is_finite() && *x > 0.0);
        if !all_valid {
            return Err(GeometryError::InvalidCovariance([v0, v1, v2]));
        }
        Ok(DiagCov3(Vector3::new(v0, v1, v2)))
    }

    pub fn from_sigmas(s: &Vector3<f64>) -> Result<Self, GeometryError> {
        Self::new(s.x * s.x, s.y * s.y, s.z * s.z)
    }

    pub fn isotropic(var: f64) -> Result<Self, GeometryError> {
        Self::new(var, var, var)
    }

    pub fn variances(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn sigmas(&self) -> Vector3<f64> {
        self.0.map(f64::sqrt)
    }

    pub fn trace(&self) -> f64 {
        self.0.sum()
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&self.0)
    }
}

impl TryFrom<[f64; 3]> for DiagCov3 {
    type Error = GeometryError;
    fn try_from(v: [f64; 3]) -> Result<Self, Self::Error> {
        DiagCov3::new(v[0], v[1], v[2])
    }
}

impl From<DiagCov3> for [f64; 3] {
    fn from(c: DiagCov3) -> Self {
        [c.0.x, c.0.y, c.0.z]
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Exponential map so(3) → SO(3) via the Rodrigues formula.
///
/// For angles below `1e-8` the second-order Taylor series of the
/// coefficients is used.
pub fn so3_exp(theta: &Vector3<f64>) -> RotationMatrix {
    let angle = theta.norm();
    let k = skew(theta);
    let k2 = k * k;
    let (a, b) = if angle < EXP_TAYLOR_THRESHOLD {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    };
    RotationMatrix(Matrix3::identity() + k * a + k2 * b)
}

/// Logarithm map SO(3) → so(3), returning the axis-angle vector `θ v` with
/// `θ ∈ [0, π]`.
///
/// Three branches: a trace-based Taylor series near θ=0, diagonal-dominant
/// axis extraction near θ=π, and the generic formula elsewhere. At exactly
/// θ=π the axis sign is canonicalized so its first nonzero component is
/// positive.
pub fn so3_log(r: &RotationMatrix) -> Vector3<f64> {
    let m = &r.0;
    let trace = m.trace();
    let cos_angle = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let angle = cos_angle.acos();
    let antisym = vee(&(m - m.transpose())) / 2.0;

    if angle < LOG_TAYLOR_THRESHOLD {
        // θ/sin θ ≈ 1 + θ²/6 + 7θ⁴/360
        let a2 = angle * angle;
        return antisym * (1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0);
    }

    if angle > std::f64::consts::PI - LOG_PI_THRESHOLD {
        // R ≈ I + (1 - cos θ)(vvᵀ - I); recover v from the dominant diagonal.
        let one_minus_cos = 1.0 - cos_angle;
        let diag = Vector3::new(m[(0, 0)], m[(1, 1)], m[(2, 2)]);
        let k = diag.imax();
        let vk = ((diag[k] - cos_angle) / one_minus_cos).max(0.0).sqrt();
        let mut axis = Vector3::zeros();
        axis[k] = vk;
        for j in 0..3 {
            if j != k {
                axis[j] = (m[(k, j)] + m[(j, k)]) / (2.0 * one_minus_cos * vk);
            }
        }
        axis.normalize_mut();
        // Off-diagonal sums lose the sign of v near π; recover it from the
        // antisymmetric part while it is still meaningful, otherwise apply
        // the first-nonzero-positive tie-break.
        let proj = axis.dot(&antisym);
        if proj.abs() > 1e-12 {
            if proj < 0.0 {
                axis = -axis;
            }
        } else {
            for j in 0..3 {
                if axis[j].abs() > 1e-12 {
                    if axis[j] < 0.0 {
                        axis = -axis;
                    }
                    break;
                }
            }
        }
        return axis * angle;
    }

    antisym * (angle / angle.sin())
}

/// Orthonormalize a 6D rotation representation (two stacked 3-vectors) into
/// a rotation matrix via Gram-Schmidt; the third column is the cross
/// product of the first two.
pub fn gram_schmidt_rotation(m: &[f64; 6]) -> Result<RotationMatrix, GeometryError> {
    let a = Vector3::new(m[0], m[1], m[2]);
    let b = Vector3::new(m[3], m[4], m[5]);
    let norm_a = a.norm();
    let norm_b = b.norm();
    if norm_a < 1e-12 || norm_b < 1e-12 {
        return Err(GeometryError::DegenerateInput(format!(
            "column norms {norm_a:.3e}, {norm_b:.3e}"
        )));
    }
    let c1 = a / norm_a;
    let b_perp = b - c1 * c1.dot(&b);
    if b_perp.norm() < 1e-12 * norm_b {
        return Err(GeometryError::DegenerateInput(
            "input vectors are parallel".to_string(),
        ));
    }
    let c2 = b_perp.normalize();
    let c3 = c1.cross(&c2);
    Ok(RotationMatrix(Matrix3::from_columns(&[c1, c2, c3])))
}

/// Error propagation of a diagonal covariance through a rotation:
/// `R Σ Rᵀ`. The result is symmetric positive definite with the same
/// eigenvalues as `Σ`.
pub fn rotate_covariance(cov: &DiagCov3, r: &RotationMatrix) -> Matrix3<f64> {
    let rotated = r.0 * cov.to_matrix() * r.0.transpose();
    // Enforce exact symmetry against rounding.
    (rotated + rotated.transpose()) / 2.0
}

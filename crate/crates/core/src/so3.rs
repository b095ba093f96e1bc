//! Unit quaternions, rotation matrices and the attitude-error parameterizations
//! shared by the controllers, the estimator and the metrics.
//!
//! Conventions: quaternions are stored `(w, x, y, z)`, use the Hamilton product,
//! and act body-to-world, i.e. `v_W = q ⊗ v_B ⊗ q⁻¹ = R v_B`. Every public
//! constructor and operation returns a normalized quaternion with `w ≥ 0`.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Scalar part below which two attitudes are treated as 180° apart.
pub const ANTIPODAL_TOLERANCE: f64 = 1e-9;
/// Distance from ±π/2 pitch at which the ZYX decomposition is refused.
pub const GIMBAL_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum So3Error {
    #[error("attitudes are antipodal (180° apart); the error quaternion has no finite vector parameterization")]
    AttitudeAntipodal,
    #[error("pitch {pitch} rad is within {GIMBAL_TOLERANCE} of ±π/2; yaw and roll are not separable")]
    GimbalDegenerate { pitch: f64 },
    #[error("quaternion components must be finite and not all zero")]
    InvalidQuaternion,
}

/// Rotation represented as a unit quaternion `(w, x, y, z)` with `w ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::identity()
    }
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = So3Error;

    fn try_from(c: [f64; 4]) -> Result<Self, So3Error> {
        Self::from_wxyz(c[0], c[1], c[2], c[3])
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.to_array()
    }
}

impl UnitQuaternion {
    pub const fn identity() -> Self {
        Self {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Normalizes `(w, x, y, z)` and canonicalizes the sign.
    pub fn from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < f64::MIN_POSITIVE {
            return Err(So3Error::InvalidQuaternion);
        }
        Ok(Self::canonical(w / n, x / n, y / n, z / n))
    }

    /// Normalizing constructor from a `[w, x, y, z]` slice of a state vector.
    ///
    /// Panics on a zero or non-finite quaternion; state vectors produced by
    /// this crate never contain one.
    pub fn from_slice(c: &[f64]) -> Self {
        Self::from_wxyz(c[0], c[1], c[2], c[3]).expect("state quaternion must be nonzero and finite")
    }

    fn canonical(w: f64, x: f64, y: f64, z: f64) -> Self {
        if w < 0.0 {
            Self {
                w: -w,
                x: -x,
                y: -y,
                z: -z,
            }
        } else {
            Self { w, x, y, z }
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let n = axis.norm();
        if n < f64::MIN_POSITIVE || angle == 0.0 {
            return Self::identity();
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let a = axis / n;
        Self::canonical(c, s * a.x, s * a.y, s * a.z)
    }

    /// Exponential map of a rotation vector (axis · angle).
    pub fn from_rotation_vector(v: &Vector3<f64>) -> Self {
        let angle = v.norm();
        if angle < 1e-12 {
            // second-order expansion keeps the map smooth at the origin
            return Self::from_wxyz(1.0 - angle * angle / 8.0, 0.5 * v.x, 0.5 * v.y, 0.5 * v.z)
                .unwrap_or_default();
        }
        Self::from_axis_angle(v, angle)
    }

    /// Rotation vector of this quaternion; angle in `[0, π]`.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let v = self.vector();
        let s = v.norm();
        if s < 1e-12 {
            return 2.0 * v;
        }
        v * (2.0 * s.atan2(self.w) / s)
    }

    /// `R = R_z(yaw) R_y(pitch) R_x(roll)`.
    pub fn from_euler_zyx(roll: f64, pitch: f64, yaw: f64) -> Self {
        let (sr, cr) = (0.5 * roll).sin_cos();
        let (sp, cp) = (0.5 * pitch).sin_cos();
        let (sy, cy) = (0.5 * yaw).sin_cos();
        Self::canonical(
            cr * cp * cy + sr * sp * sy,
            sr * cp * cy - cr * sp * sy,
            cr * sp * cy + sr * cp * sy,
            cr * cp * sy - sr * sp * cy,
        )
    }

    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw)
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn coords(&self) -> Vector4<f64> {
        Vector4::new(self.w, self.x, self.y, self.z)
    }

    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self ⊗ rhs`, renormalized.
    pub fn multiply(&self, rhs: &Self) -> Self {
        let [w, x, y, z] = hamilton(&self.to_array(), &rhs.to_array());
        Self::from_wxyz(w, x, y, z).expect("product of unit quaternions is nonzero")
    }

    /// `q ⊗ v ⊗ q⁻¹`.
    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.to_rotation_matrix().matrix() * v
    }

    pub fn to_rotation_matrix(&self) -> RotationMatrix {
        RotationMatrix(rotation_matrix_raw(&self.to_array()))
    }

    /// Geodesic angle to `other`, in `[0, π]`.
    pub fn angle_to(&self, other: &Self) -> f64 {
        let d = self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z;
        2.0 * d.abs().min(1.0).acos()
    }

    /// ZYX Euler angles `(roll, pitch, yaw)`.
    pub fn euler_zyx(&self) -> Result<Vector3<f64>, So3Error> {
        let r = rotation_matrix_raw(&self.to_array());
        let pitch = (-r[(2, 0)]).atan2((r[(0, 0)].powi(2) + r[(1, 0)].powi(2)).sqrt());
        if FRAC_PI_2 - pitch.abs() < GIMBAL_TOLERANCE {
            return Err(So3Error::GimbalDegenerate { pitch });
        }
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        let yaw = r[(1, 0)].atan2(r[(0, 0)]);
        Ok(Vector3::new(roll, pitch, yaw))
    }
}

impl std::ops::Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: Self) -> Self {
        self.multiply(&rhs)
    }
}

/// Raw Hamilton product of two `[w, x, y, z]` arrays (no normalization).
pub fn hamilton(a: &[f64; 4], b: &[f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = *a;
    let [bw, bx, by, bz] = *b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

/// Rotation matrix of a possibly non-unit quaternion, homogeneous form.
///
/// Equals the usual rotation matrix scaled by `‖q‖²`; the integrators call this
/// on intermediate stages where the quaternion drifts off the unit sphere.
pub fn rotation_matrix_raw(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        w * w + x * x - y * y - z * z,
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        w * w - x * x + y * y - z * z,
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        w * w - x * x - y * y + z * z,
    )
}

/// Partial derivatives of [`rotation_matrix_raw`] with respect to `w, x, y, z`.
pub fn rotation_matrix_raw_partials(q: &[f64; 4]) -> [Matrix3<f64>; 4] {
    let [w, x, y, z] = *q;
    [
        Matrix3::new(w, -z, y, z, w, -x, -y, x, w) * 2.0,
        Matrix3::new(x, y, z, y, -x, -w, z, w, -x) * 2.0,
        Matrix3::new(-y, x, w, x, y, z, -w, z, -y) * 2.0,
        Matrix3::new(-z, -w, x, w, -z, y, x, y, z) * 2.0,
    ]
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of SO(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Pure yaw rotation `R_z(ψ)`.
    pub fn rz(yaw: f64) -> Self {
        let (s, c) = yaw.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    pub fn ry(pitch: f64) -> Self {
        let (s, c) = pitch.sin_cos();
        Self(Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c))
    }

    pub fn rx(roll: f64) -> Self {
        let (s, c) = roll.sin_cos();
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    /// Shepperd's method; the branch is picked on the largest diagonal term.
    pub fn to_quaternion(&self) -> UnitQuaternion {
        let m = &self.0;
        let trace = m.trace();
        let (w, x, y, z) = if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
            let s = 2.0 * (1.0 + trace).sqrt();
            (
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            (
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] >= m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            (
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            (
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        UnitQuaternion::from_wxyz(w, x, y, z).expect("rotation matrix yields a nonzero quaternion")
    }
}

impl std::ops::Mul<Vector3<f64>> for RotationMatrix {
    type Output = Vector3<f64>;

    fn mul(self, v: Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// Vector part of the error quaternion `Δq = q⁻¹ ⊗ q_r`, scaled to unit scalar part.
///
/// With `Δq = [1, q_e]` (unnormalized) we have `q_r = q ⊗ Δq`; `‖q_e‖ = tan(θ/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttitudeError(pub Vector3<f64>);

impl AttitudeError {
    pub fn vector(&self) -> &Vector3<f64> {
        &self.0
    }

    /// Rotation vector of the same error, `2·atan(‖q_e‖)` about `q_e / ‖q_e‖`.
    pub fn to_rotation_vector(&self) -> Vector3<f64> {
        let n = self.0.norm();
        if n < 1e-12 {
            return 2.0 * self.0;
        }
        self.0 * (2.0 * n.atan() / n)
    }
}

pub fn quat_multiply(a: &UnitQuaternion, b: &UnitQuaternion) -> UnitQuaternion {
    a.multiply(b)
}

pub fn quat_to_rotmat(q: &UnitQuaternion) -> RotationMatrix {
    q.to_rotation_matrix()
}

pub fn rotmat_to_quat(r: &RotationMatrix) -> UnitQuaternion {
    r.to_quaternion()
}

pub fn attitude_error(q: &UnitQuaternion, q_ref: &UnitQuaternion) -> Result<AttitudeError, So3Error> {
    attitude_error_raw(&q.to_array(), &q_ref.to_array())
}

/// [`attitude_error`] on raw, possibly non-unit quaternions.
///
/// The result is invariant to the scale of either argument, which keeps the
/// Gauss-Newton linearization well defined when shooting nodes drift slightly
/// off the unit sphere.
pub fn attitude_error_raw(q: &[f64; 4], q_ref: &[f64; 4]) -> Result<AttitudeError, So3Error> {
    let conj = [q[0], -q[1], -q[2], -q[3]];
    let mut d = hamilton(&conj, q_ref);
    let norm = d.iter().map(|c| c * c).sum::<f64>().sqrt();
    if !norm.is_finite() || norm < f64::MIN_POSITIVE {
        return Err(So3Error::InvalidQuaternion);
    }
    if d[0] < 0.0 {
        d.iter_mut().for_each(|c| *c = -*c);
    }
    if d[0] < ANTIPODAL_TOLERANCE * norm {
        return Err(So3Error::AttitudeAntipodal);
    }
    Ok(AttitudeError(Vector3::new(d[1], d[2], d[3]) / d[0]))
}

pub fn yaw_of(q: &UnitQuaternion) -> Result<f64, So3Error> {
    q.euler_zyx().map(|e| e.z)
}

/// ZYX Euler angles of `q_r⁻¹ ⊗ q`, the attitude of `q` seen from the reference.
///
/// Used for reporting only.
pub fn error_euler(q: &UnitQuaternion, q_ref: &UnitQuaternion) -> Result<Vector3<f64>, So3Error> {
    q_ref.inverse().multiply(q).euler_zyx()
}

/// Body angular velocity produced by ZYX Euler-angle rates.
pub fn euler_zyx_rates_to_body(euler: &Vector3<f64>, rates: &Vector3<f64>) -> Vector3<f64> {
    let (sr, cr) = euler.x.sin_cos();
    let (sp, cp) = euler.y.sin_cos();
    Vector3::new(
        rates.x - sp * rates.z,
        cr * rates.y + sr * cp * rates.z,
        -sr * rates.y + cr * cp * rates.z,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn sandwich(q: &UnitQuaternion, v: &Vector3<f64>) -> Vector3<f64> {
        let p = [0.0, v.x, v.y, v.z];
        let conj = q.inverse().to_array();
        let r = hamilton(&hamilton(&q.to_array(), &p), &conj);
        Vector3::new(r[1], r[2], r[3])
    }

    fn quat_strategy() -> impl Strategy<Value = UnitQuaternion> {
        (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
            .prop_filter("nonzero", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| UnitQuaternion::from_wxyz(w, x, y, z).unwrap())
    }

    #[test]
    fn identity_is_neutral_and_inverse_cancels() {
        let q = UnitQuaternion::from_wxyz(0.3, -0.2, 0.9, 0.1).unwrap();
        let id = UnitQuaternion::identity();
        assert_eq!(id * q, q);
        let p = q * q.inverse();
        assert_abs_diff_eq!(p.w(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.vector().norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn quarter_turns_about_z_compose_to_half_turn() {
        let q = UnitQuaternion::from_yaw(PI / 2.0);
        let half = q * q;
        // oracle: compose matrices, convert back
        let r = RotationMatrix::rz(PI / 2.0).compose(&RotationMatrix::rz(PI / 2.0));
        let expected = r.to_quaternion();
        for (a, b) in half.to_array().iter().zip(expected.to_array()) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(half.z(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rotation_matrix_special_cases() {
        assert_eq!(*UnitQuaternion::identity().to_rotation_matrix().matrix(), Matrix3::identity());
        let r = UnitQuaternion::from_wxyz(0.0, 1.0, 0.0, 0.0).unwrap().to_rotation_matrix();
        assert_abs_diff_eq!(*r.matrix(), Matrix3::from_diagonal(&Vector3::new(1.0, -1.0, -1.0)), epsilon = 1e-15);
    }

    #[test]
    fn rotation_matrix_matches_quaternion_sandwich() {
        let q = UnitQuaternion::from_wxyz(0.41, -0.33, 0.72, 0.2).unwrap();
        let r = q.to_rotation_matrix();
        let mut seed = 17u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for _ in 0..100 {
            let v = Vector3::new(next(), next(), next()) * 5.0;
            assert_abs_diff_eq!(r * v, sandwich(&q, &v), epsilon = 1e-12);
        }
    }

    #[test]
    fn attitude_error_examples() {
        let q = UnitQuaternion::from_wxyz(0.9, 0.1, -0.3, 0.2).unwrap();
        assert_abs_diff_eq!(*attitude_error(&q, &q).unwrap().vector(), Vector3::zeros(), epsilon = 1e-15);

        let ten_deg = 10f64.to_radians();
        let e = attitude_error(&UnitQuaternion::identity(), &UnitQuaternion::from_yaw(ten_deg)).unwrap();
        assert_abs_diff_eq!(*e.vector(), Vector3::new(0.0, 0.0, (ten_deg / 2.0).tan()), epsilon = 1e-15);
        assert_abs_diff_eq!(e.vector().z, 0.0875, epsilon = 1e-4);

        let anti = UnitQuaternion::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0), PI);
        assert_eq!(
            attitude_error(&UnitQuaternion::identity(), &anti),
            Err(So3Error::AttitudeAntipodal)
        );
    }

    #[test]
    fn yaw_examples() {
        assert_eq!(yaw_of(&UnitQuaternion::identity()).unwrap(), 0.0);
        let thirty = 30f64.to_radians();
        assert_abs_diff_eq!(yaw_of(&UnitQuaternion::from_yaw(thirty)).unwrap(), 0.5236, epsilon = 1e-4);
        // yaw applied after a 20° pitch: R = Rz(30°)·Ry(20°); ZYX re-extraction
        let composed = UnitQuaternion::from_yaw(thirty)
            * UnitQuaternion::from_axis_angle(&Vector3::y(), 20f64.to_radians());
        let r = RotationMatrix::rz(thirty).compose(&RotationMatrix::ry(20f64.to_radians()));
        let oracle = r.matrix()[(1, 0)].atan2(r.matrix()[(0, 0)]);
        assert_abs_diff_eq!(yaw_of(&composed).unwrap(), oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(yaw_of(&composed).unwrap(), thirty, epsilon = 1e-12);

        let gimbal = UnitQuaternion::from_euler_zyx(0.1, PI / 2.0, 0.3);
        assert!(matches!(yaw_of(&gimbal), Err(So3Error::GimbalDegenerate { .. })));
    }

    #[test]
    fn error_euler_examples() {
        let q = UnitQuaternion::from_euler_zyx(0.2, -0.4, 1.0);
        assert_abs_diff_eq!(error_euler(&q, &q).unwrap(), Vector3::zeros(), epsilon = 1e-12);
        let reference = UnitQuaternion::from_euler_zyx(45f64.to_radians(), 0.0, 0.0);
        let actual = UnitQuaternion::from_euler_zyx(50f64.to_radians(), 0.0, 0.0);
        let e = error_euler(&actual, &reference).unwrap();
        assert_abs_diff_eq!(e, Vector3::new(5f64.to_radians(), 0.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(e.x, 0.0873, epsilon = 1e-4);
    }

    #[test]
    fn euler_rates_map_to_body_rates() {
        // finite-difference the quaternion of a moving ZYX attitude
        let euler = Vector3::new(0.3, -0.2, 0.7);
        let rates = Vector3::new(0.5, -1.2, 0.8);
        let h = 1e-6;
        let q0 = UnitQuaternion::from_euler_zyx(euler.x, euler.y, euler.z);
        let e1 = euler + rates * h;
        let q1 = UnitQuaternion::from_euler_zyx(e1.x, e1.y, e1.z);
        let omega_fd = (q0.inverse() * q1).to_rotation_vector() / h;
        assert_abs_diff_eq!(euler_zyx_rates_to_body(&euler, &rates), omega_fd, epsilon = 1e-5);
    }

    #[test]
    fn raw_partials_match_finite_differences() {
        let q = [0.8, -0.3, 0.25, 0.4];
        let parts = rotation_matrix_raw_partials(&q);
        for i in 0..4 {
            let mut qp = q;
            let mut qm = q;
            qp[i] += 1e-6;
            qm[i] -= 1e-6;
            let fd = (rotation_matrix_raw(&qp) - rotation_matrix_raw(&qm)) / 2e-6;
            assert_abs_diff_eq!(fd, parts[i], epsilon = 1e-8);
        }
    }

    proptest! {
        #[test]
        fn unit_norm_and_canonical_sign(a in quat_strategy(), b in quat_strategy()) {
            let p = a * b;
            prop_assert!((p.coords().norm() - 1.0).abs() < 1e-9);
            prop_assert!(p.w() >= 0.0);
        }

        #[test]
        fn rotmat_round_trip(q in quat_strategy()) {
            let r = q.to_rotation_matrix();
            let rtr = r.matrix().transpose() * r.matrix();
            prop_assert!((rtr - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.matrix().determinant() - 1.0).abs() < 1e-9);
            let back = r.to_quaternion();
            let same = back.coords() - q.coords();
            let flipped = back.coords() + q.coords();
            prop_assert!(same.abs().max() < 1e-9 || flipped.abs().max() < 1e-9);
        }

        #[test]
        fn attitude_error_recovers_perturbation(
            q in quat_strategy(),
            ex in -0.57..0.57f64, ey in -0.57..0.57f64, ez in -0.57..0.57f64,
        ) {
            let e = Vector3::new(ex, ey, ez);
            prop_assume!(e.norm() < 1.0);
            let dq = UnitQuaternion::from_wxyz(1.0, e.x, e.y, e.z).unwrap();
            let q_ref = q * dq;
            let got = attitude_error(&q, &q_ref).unwrap();
            prop_assert!((got.vector() - e).abs().max() < 1e-9);
        }

        #[test]
        fn yaw_of_pure_yaw(psi in -PI..PI) {
            let psi = if psi <= -PI { PI } else { psi };
            let q = RotationMatrix::rz(psi).to_quaternion();
            prop_assert!((yaw_of(&q).unwrap() - psi).abs() < 1e-12);
        }

        #[test]
        fn error_euler_tracks_geodesic_angle(
            q in quat_strategy(),
            rx in -1.0..1.0f64, ry in -1.0..1.0f64, rz in -1.0..1.0f64,
            mag in 0.001..10f64,
        ) {
            let axis = Vector3::new(rx, ry, rz);
            prop_assume!(axis.norm() > 1e-3);
            let q_ref = q * UnitQuaternion::from_axis_angle(&axis, mag.to_radians());
            prop_assume!(q_ref.euler_zyx().is_ok());
            let e = error_euler(&q, &q_ref).unwrap();
            let geodesic = q.angle_to(&q_ref);
            prop_assert!((e.norm() - geodesic).abs() <= 0.15 * geodesic);
        }
    }
}

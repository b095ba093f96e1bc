//! Newton-Euler rigid-body dynamics with a residual wrench, and the RK4
//! integrator shared by the plant and the MPC prediction models.

use crate::so3::{hamilton, rotation_matrix_raw, rotation_matrix_raw_partials, skew, UnitQuaternion};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::ops::{Add, AddAssign, Neg, Sub};
use thiserror::Error;

pub const STANDARD_GRAVITY: f64 = 9.81;

/// Raw rigid state `[p (3), q (4, w first), v (3), ω (3)]`.
pub type RigidVector = SVector<f64, 13>;

pub mod layout {
    pub const P: usize = 0;
    pub const Q: usize = 3;
    pub const V: usize = 7;
    pub const W: usize = 10;
    pub const LEN: usize = 13;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamsError {
    #[error("mass must be positive and finite, got {0}")]
    Mass(f64),
    #[error("inertia must be symmetric positive definite")]
    Inertia,
    #[error("gravity must be finite")]
    Gravity,
}

/// Pose and twist: position in the world frame, velocities in the body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl Default for RigidState {
    fn default() -> Self {
        Self::at_rest(Vector3::zeros(), UnitQuaternion::identity())
    }
}

impl RigidState {
    pub fn at_rest(position: Vector3<f64>, attitude: UnitQuaternion) -> Self {
        Self {
            position,
            attitude,
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
        }
    }

    pub fn to_vector(&self) -> RigidVector {
        let mut x = RigidVector::zeros();
        x.fixed_rows_mut::<3>(layout::P).copy_from(&self.position);
        x.fixed_rows_mut::<4>(layout::Q).copy_from(&self.attitude.coords());
        x.fixed_rows_mut::<3>(layout::V).copy_from(&self.velocity);
        x.fixed_rows_mut::<3>(layout::W).copy_from(&self.angular_velocity);
        x
    }

    /// Inverse of [`to_vector`](Self::to_vector); the quaternion is renormalized.
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            position: Vector3::from_column_slice(&x[layout::P..layout::P + 3]),
            attitude: UnitQuaternion::from_slice(&x[layout::Q..layout::Q + 4]),
            velocity: Vector3::from_column_slice(&x[layout::V..layout::V + 3]),
            angular_velocity: Vector3::from_column_slice(&x[layout::W..layout::W + 3]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|c| c.is_finite())
    }

    /// World-frame velocity `R_B v`.
    pub fn world_velocity(&self) -> Vector3<f64> {
        self.attitude.rotate(&self.velocity)
    }

    pub fn kinetic_energy(&self, params: &InertialParams) -> f64 {
        0.5 * params.mass * self.velocity.norm_squared()
            + 0.5 * self.angular_velocity.dot(&(params.inertia * self.angular_velocity))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInertialParams", into = "RawInertialParams")]
pub struct InertialParams {
    pub mass: f64,
    pub inertia: Matrix3<f64>,
    pub gravity: Vector3<f64>,
    inertia_inv: Matrix3<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawInertialParams {
    mass: f64,
    inertia: Matrix3<f64>,
    gravity: Vector3<f64>,
}

impl TryFrom<RawInertialParams> for InertialParams {
    type Error = ParamsError;

    fn try_from(r: RawInertialParams) -> Result<Self, ParamsError> {
        InertialParams::new(r.mass, r.inertia, r.gravity)
    }
}

impl From<InertialParams> for RawInertialParams {
    fn from(p: InertialParams) -> Self {
        Self {
            mass: p.mass,
            inertia: p.inertia,
            gravity: p.gravity,
        }
    }
}

impl InertialParams {
    pub fn new(mass: f64, inertia: Matrix3<f64>, gravity: Vector3<f64>) -> Result<Self, ParamsError> {
        if !(mass.is_finite() && mass > 0.0) {
            return Err(ParamsError::Mass(mass));
        }
        if (inertia - inertia.transpose()).abs().max() > 1e-12 * inertia.abs().max().max(1.0) {
            return Err(ParamsError::Inertia);
        }
        let inertia_inv = inertia.cholesky().ok_or(ParamsError::Inertia)?.inverse();
        if !gravity.iter().all(|g| g.is_finite()) {
            return Err(ParamsError::Gravity);
        }
        Ok(Self {
            mass,
            inertia,
            gravity,
            inertia_inv,
        })
    }

    /// Platform of 4.36 kg with diagonal inertia `diag(0.08, 0.08, 0.14)` kg·m².
    pub fn default_platform() -> Self {
        Self::new(
            4.36,
            Matrix3::from_diagonal(&Vector3::new(0.08, 0.08, 0.14)),
            Vector3::new(0.0, 0.0, -STANDARD_GRAVITY),
        )
        .expect("default parameters are valid")
    }

    pub fn inertia_inv(&self) -> &Matrix3<f64> {
        &self.inertia_inv
    }

    /// Body-frame force that holds the vehicle against gravity at attitude `q`.
    pub fn hover_force(&self, q: &UnitQuaternion) -> Vector3<f64> {
        -self.mass * q.to_rotation_matrix().matrix().transpose() * self.gravity
    }
}

/// Force and torque acting at the centre of mass, body frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Wrench {
    pub force: Vector3<f64>,
    pub torque: Vector3<f64>,
}

impl Wrench {
    pub fn new(force: Vector3<f64>, torque: Vector3<f64>) -> Self {
        Self { force, torque }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            force: v.fixed_rows::<3>(0).into_owned(),
            torque: v.fixed_rows::<3>(3).into_owned(),
        }
    }

    pub fn from_slice(s: &[f64]) -> Self {
        Self {
            force: Vector3::from_column_slice(&s[0..3]),
            torque: Vector3::from_column_slice(&s[3..6]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        let mut v = Vector6::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.force);
        v.fixed_rows_mut::<3>(3).copy_from(&self.torque);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.force.iter().chain(self.torque.iter()).all(|c| c.is_finite())
    }

    /// Componentwise clamp to `±limit`; returns whether any component saturated.
    pub fn clamp_symmetric(&self, limit: &Wrench) -> (Wrench, bool) {
        let mut v = self.to_vector();
        let l = limit.to_vector();
        let mut saturated = false;
        for i in 0..6 {
            let c = v[i].clamp(-l[i], l[i]);
            saturated |= c != v[i];
            v[i] = c;
        }
        (Wrench::from_vector(&v), saturated)
    }
}

impl Add for Wrench {
    type Output = Wrench;
    fn add(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force + rhs.force, self.torque + rhs.torque)
    }
}

impl AddAssign for Wrench {
    fn add_assign(&mut self, rhs: Wrench) {
        self.force += rhs.force;
        self.torque += rhs.torque;
    }
}

impl Sub for Wrench {
    type Output = Wrench;
    fn sub(self, rhs: Wrench) -> Wrench {
        Wrench::new(self.force - rhs.force, self.torque - rhs.torque)
    }
}

impl Neg for Wrench {
    type Output = Wrench;
    fn neg(self) -> Wrench {
        Wrench::new(-self.force, -self.torque)
    }
}

/// Time derivative of a [`RigidState`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateDerivative {
    pub position: Vector3<f64>,
    pub attitude: [f64; 4],
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
}

impl StateDerivative {
    pub fn to_vector(&self) -> RigidVector {
        let mut d = RigidVector::zeros();
        d.fixed_rows_mut::<3>(layout::P).copy_from(&self.position);
        d.fixed_rows_mut::<4>(layout::Q).copy_from_slice(&self.attitude);
        d.fixed_rows_mut::<3>(layout::V).copy_from(&self.velocity);
        d.fixed_rows_mut::<3>(layout::W).copy_from(&self.angular_velocity);
        d
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// `ẋ = f_R(x, w_a, Δw)`.
pub fn dynamics(x: &RigidState, actuator: &Wrench, residual: &Wrench, params: &InertialParams) -> StateDerivative {
    let d = rigid_rhs(&x.to_vector(), &(*actuator + *residual), params);
    StateDerivative {
        position: d.fixed_rows::<3>(layout::P).into_owned(),
        attitude: [d[3], d[4], d[5], d[6]],
        velocity: d.fixed_rows::<3>(layout::V).into_owned(),
        angular_velocity: d.fixed_rows::<3>(layout::W).into_owned(),
    }
}

/// Right-hand side on the raw vector; `total` is actuator plus residual wrench.
pub fn rigid_rhs(x: &RigidVector, total: &Wrench, params: &InertialParams) -> RigidVector {
    let q = [x[3], x[4], x[5], x[6]];
    let r = rotation_matrix_raw(&q);
    let v: Vector3<f64> = x.fixed_rows::<3>(layout::V).into_owned();
    let w: Vector3<f64> = x.fixed_rows::<3>(layout::W).into_owned();

    let p_dot = r * v;
    let qd = hamilton(&q, &[0.0, w.x, w.y, w.z]);
    let v_dot = total.force / params.mass + r.transpose() * params.gravity - w.cross(&v);
    let w_dot = params.inertia_inv * (total.torque - w.cross(&(params.inertia * w)));

    let mut d = RigidVector::zeros();
    d.fixed_rows_mut::<3>(layout::P).copy_from(&p_dot);
    for i in 0..4 {
        d[layout::Q + i] = 0.5 * qd[i];
    }
    d.fixed_rows_mut::<3>(layout::V).copy_from(&v_dot);
    d.fixed_rows_mut::<3>(layout::W).copy_from(&w_dot);
    d
}

/// Analytic Jacobians of [`rigid_rhs`] with respect to the raw state and the total wrench.
pub fn rigid_rhs_jacobian(
    x: &RigidVector,
    params: &InertialParams,
) -> (SMatrix<f64, 13, 13>, SMatrix<f64, 13, 6>) {
    let q = [x[3], x[4], x[5], x[6]];
    let r = rotation_matrix_raw(&q);
    let partials = rotation_matrix_raw_partials(&q);
    let v: Vector3<f64> = x.fixed_rows::<3>(layout::V).into_owned();
    let w: Vector3<f64> = x.fixed_rows::<3>(layout::W).into_owned();
    let j = &params.inertia;
    let j_inv = &params.inertia_inv;

    let mut a = SMatrix::<f64, 13, 13>::zeros();
    // ṗ = R(q) v
    for (k, dr) in partials.iter().enumerate() {
        a.fixed_view_mut::<3, 1>(layout::P, layout::Q + k).copy_from(&(dr * v));
        a.fixed_view_mut::<3, 1>(layout::V, layout::Q + k)
            .copy_from(&(dr.transpose() * params.gravity));
    }
    a.fixed_view_mut::<3, 3>(layout::P, layout::V).copy_from(&r);

    // q̇ = ½ q ⊗ [0, ω]: linear in q (right-multiplication matrix) and in ω
    let [qw, qx, qy, qz] = q;
    let right = nalgebra::Matrix4::new(
        0.0, -w.x, -w.y, -w.z, //
        w.x, 0.0, w.z, -w.y, //
        w.y, -w.z, 0.0, w.x, //
        w.z, w.y, -w.x, 0.0,
    );
    a.fixed_view_mut::<4, 4>(layout::Q, layout::Q).copy_from(&(right * 0.5));
    let left = nalgebra::Matrix4x3::new(
        -qx, -qy, -qz, //
        qw, -qz, qy, //
        qz, qw, -qx, //
        -qy, qx, qw,
    );
    a.fixed_view_mut::<4, 3>(layout::Q, layout::W).copy_from(&(left * 0.5));

    // v̇ = f/m + Rᵀg − ω × v
    a.fixed_view_mut::<3, 3>(layout::V, layout::V).copy_from(&(-skew(&w)));
    a.fixed_view_mut::<3, 3>(layout::V, layout::W).copy_from(&skew(&v));

    // ω̇ = J⁻¹(τ − ω × Jω)
    let gyro = skew(&(j * w)) - skew(&w) * j;
    a.fixed_view_mut::<3, 3>(layout::W, layout::W).copy_from(&(j_inv * gyro));

    let mut b = SMatrix::<f64, 13, 6>::zeros();
    b.fixed_view_mut::<3, 3>(layout::V, 0)
        .copy_from(&(Matrix3::identity() / params.mass));
    b.fixed_view_mut::<3, 3>(layout::W, 3).copy_from(j_inv);
    (a, b)
}

/// Renormalizes the quaternion block of a raw state in place, `w ≥ 0`.
pub fn normalize_quaternion_block(x: &mut [f64], offset: usize) {
    let q = UnitQuaternion::from_slice(&x[offset..offset + 4]).to_array();
    x[offset..offset + 4].copy_from_slice(&q);
}

/// One classical Runge-Kutta step of `ẋ = f(x)`.
pub fn rk4<const N: usize, F>(f: F, x: &SVector<f64, N>, dt: f64) -> SVector<f64, N>
where
    F: Fn(&SVector<f64, N>) -> SVector<f64, N>,
{
    let k1 = f(x);
    let k2 = f(&(x + k1 * (0.5 * dt)));
    let k3 = f(&(x + k2 * (0.5 * dt)));
    let k4 = f(&(x + k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// One RK4 step of the rigid body with both wrenches held constant; the
/// quaternion is renormalized afterwards.
pub fn rk4_step(x: &RigidState, actuator: &Wrench, residual: &Wrench, params: &InertialParams, dt: f64) -> RigidState {
    let total = *actuator + *residual;
    let next = rk4(|s| rigid_rhs(s, &total, params), &x.to_vector(), dt);
    RigidState::from_slice(next.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn hover_wrench(params: &InertialParams) -> Wrench {
        Wrench::new(Vector3::new(0.0, 0.0, params.mass * STANDARD_GRAVITY), Vector3::zeros())
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let params = InertialParams::default_platform();
        let d = dynamics(&RigidState::default(), &hover_wrench(&params), &Wrench::zero(), &params);
        assert!(d.norm() < 1e-12);
    }

    #[test]
    fn free_fall_accelerates_with_gravity() {
        let params = InertialParams::default_platform();
        let d = dynamics(&RigidState::default(), &Wrench::zero(), &Wrench::zero(), &params);
        assert_abs_diff_eq!(d.velocity, Vector3::new(0.0, 0.0, -9.81), epsilon = 1e-15);
        assert_eq!(d.position, Vector3::zeros());
        assert_eq!(d.angular_velocity, Vector3::zeros());
    }

    #[test]
    fn euler_equations_elementwise() {
        let params = InertialParams::new(
            1.0,
            Matrix3::from_diagonal(&Vector3::new(1.0, 2.0, 3.0)),
            Vector3::zeros(),
        )
        .unwrap();
        let mut x = RigidState::default();
        x.angular_velocity = Vector3::new(1.0, 0.0, 0.0);
        let d = dynamics(&x, &Wrench::zero(), &Wrench::zero(), &params);
        assert_eq!(d.angular_velocity, Vector3::zeros());

        // Euler's equations written out per axis for a diagonal inertia:
        // J1 ω̇1 = (J2 − J3) ω2 ω3, J2 ω̇2 = (J3 − J1) ω3 ω1, J3 ω̇3 = (J1 − J2) ω1 ω2
        let (j1, j2, j3) = (1.0, 2.0, 3.0);
        for w in [Vector3::new(1.0, 1.0, 0.0), Vector3::new(0.3, -0.7, 1.9)] {
            x.angular_velocity = w;
            let d = dynamics(&x, &Wrench::zero(), &Wrench::zero(), &params);
            let oracle = Vector3::new(
                (j2 - j3) * w.y * w.z / j1,
                (j3 - j1) * w.z * w.x / j2,
                (j1 - j2) * w.x * w.y / j3,
            );
            assert_abs_diff_eq!(d.angular_velocity, oracle, epsilon = 1e-14);
        }
    }

    #[test]
    fn rk4_free_fall_matches_closed_form() {
        let params = InertialParams::default_platform();
        let mut x = RigidState::default();
        for _ in 0..1000 {
            x = rk4_step(&x, &Wrench::zero(), &Wrench::zero(), &params, 1e-3);
        }
        assert_abs_diff_eq!(x.velocity.z, -9.81, epsilon = 1e-9);
        assert_abs_diff_eq!(x.position.z, -4.905, epsilon = 1e-9);
    }

    #[test]
    fn rk4_holds_hover() {
        let params = InertialParams::default_platform();
        let x0 = RigidState::at_rest(Vector3::new(1.0, -2.0, 3.0), UnitQuaternion::identity());
        let mut x = x0;
        for _ in 0..10_000 {
            x = rk4_step(&x, &hover_wrench(&params), &Wrench::zero(), &params, 1e-3);
        }
        assert!((x.to_vector() - x0.to_vector()).abs().max() < 1e-9);
    }

    fn integrate(x0: &RigidState, w: &Wrench, params: &InertialParams, dt: f64, t: f64) -> RigidState {
        let steps = (t / dt).round() as usize;
        (0..steps).fold(*x0, |x, _| rk4_step(&x, w, &Wrench::zero(), params, dt))
    }

    /// Error ratio between dt and dt/2 against a fine-step reference.
    pub(crate) fn richardson_ratio() -> f64 {
        let params = InertialParams::default_platform();
        let x0 = RigidState {
            position: Vector3::zeros(),
            attitude: UnitQuaternion::from_euler_zyx(0.2, -0.1, 0.4),
            velocity: Vector3::new(1.0, -0.5, 0.3),
            angular_velocity: Vector3::new(2.0, -1.5, 3.0),
        };
        let w = Wrench::new(Vector3::new(3.0, -2.0, 40.0), Vector3::new(0.4, -0.3, 0.2));
        let reference = integrate(&x0, &w, &params, 1e-5, 1.0).to_vector();
        let coarse = integrate(&x0, &w, &params, 0.05, 1.0).to_vector();
        let fine = integrate(&x0, &w, &params, 0.025, 1.0).to_vector();
        (coarse - reference).norm() / (fine - reference).norm()
    }

    #[test]
    fn rk4_is_fourth_order() {
        let ratio = richardson_ratio();
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn torque_free_energy_is_conserved() {
        let params = InertialParams::new(
            4.36,
            Matrix3::from_diagonal(&Vector3::new(0.08, 0.08, 0.14)),
            Vector3::zeros(),
        )
        .unwrap();
        let x0 = RigidState {
            position: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            velocity: Vector3::new(0.5, 1.0, -0.2),
            angular_velocity: Vector3::new(1.0, 2.0, 0.5),
        };
        let e0 = x0.kinetic_energy(&params);
        let x = integrate(&x0, &Wrench::zero(), &params, 1e-3, 10.0);
        assert!(((x.kinetic_energy(&params) - e0) / e0).abs() < 1e-6);
        assert!((x.attitude.coords().norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn analytic_jacobian_matches_central_differences() {
        let params = InertialParams::default_platform();
        let x = RigidState {
            position: Vector3::new(0.3, 0.1, -0.2),
            attitude: UnitQuaternion::from_euler_zyx(0.4, -0.3, 1.1),
            velocity: Vector3::new(0.7, -0.4, 0.2),
            angular_velocity: Vector3::new(0.5, 1.3, -0.9),
        }
        .to_vector();
        let w = Wrench::new(Vector3::new(1.0, 2.0, 40.0), Vector3::new(0.1, 0.2, -0.3));
        let (a, b) = rigid_rhs_jacobian(&x, &params);
        let h = 1e-6;
        for i in 0..13 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let col = (rigid_rhs(&xp, &w, &params) - rigid_rhs(&xm, &w, &params)) / (2.0 * h);
            assert!((col - a.column(i)).abs().max() < 1e-6, "state column {i}");
        }
        for i in 0..6 {
            let mut wp = w.to_vector();
            let mut wm = w.to_vector();
            wp[i] += h;
            wm[i] -= h;
            let col = (rigid_rhs(&x, &Wrench::from_vector(&wp), &params)
                - rigid_rhs(&x, &Wrench::from_vector(&wm), &params))
                / (2.0 * h);
            assert!((col - b.column(i)).abs().max() < 1e-6, "wrench column {i}");
        }
    }

    proptest! {
        #[test]
        fn dynamics_is_yaw_equivariant(
            psi in -3.0..3.0f64,
            roll in -0.5..0.5f64, pitch in -0.5..0.5f64, yaw in -3.0..3.0f64,
            vx in -2.0..2.0f64, wz in -2.0..2.0f64, fx in -10.0..10.0f64,
        ) {
            let params = InertialParams::default_platform();
            let x = RigidState {
                position: Vector3::new(1.0, -0.5, 2.0),
                attitude: UnitQuaternion::from_euler_zyx(roll, pitch, yaw),
                velocity: Vector3::new(vx, 0.3, -0.1),
                angular_velocity: Vector3::new(0.2, -0.4, wz),
            };
            let w = Wrench::new(Vector3::new(fx, 1.0, 40.0), Vector3::new(0.1, 0.0, -0.2));
            let rz = UnitQuaternion::from_yaw(psi);
            let rotated = RigidState {
                position: rz.rotate(&x.position),
                attitude: rz * x.attitude,
                ..x
            };
            let d0 = dynamics(&x, &w, &Wrench::zero(), &params);
            let d1 = dynamics(&rotated, &w, &Wrench::zero(), &params);
            prop_assert!((d1.position - rz.rotate(&d0.position)).abs().max() < 1e-10);
            prop_assert!((d1.velocity - d0.velocity).abs().max() < 1e-10);
            prop_assert!((d1.angular_velocity - d0.angular_velocity).abs().max() < 1e-10);
        }

        #[test]
        fn quaternion_stays_unit(
            wx in -5.0..5.0f64, wy in -5.0..5.0f64, wz in -5.0..5.0f64, steps in 1usize..400,
        ) {
            let params = InertialParams::default_platform();
            let mut x = RigidState::default();
            x.angular_velocity = Vector3::new(wx, wy, wz);
            for _ in 0..steps {
                x = rk4_step(&x, &Wrench::zero(), &Wrench::zero(), &params, 1e-3);
            }
            prop_assert!((x.attitude.coords().norm() - 1.0).abs() < 1e-9);
        }
    }
}

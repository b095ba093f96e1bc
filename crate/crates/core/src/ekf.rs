//! Disturbance observer: an error-state EKF over the rigid state plus a
//! constant residual wrench whose force part lives in the yaw-local frame.
//!
//! Error-state ordering: `δp, δθ, δv, δω, δf_L, δτ`. The attitude error is a
//! body-frame rotation vector, `q = q̂ ⊗ exp(δθ)`.

use crate::dynamics::{rigid_rhs, rk4, InertialParams, RigidState, Wrench};
use crate::so3::{attitude_error, rotation_matrix_raw, skew, yaw_of, So3Error, UnitQuaternion};
use nalgebra::{Matrix3, SMatrix, SVector, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ERROR_DIM: usize = 18;
/// χ² quantile with 6 degrees of freedom at 0.999.
pub const OUTLIER_GATE: f64 = 22.458;
/// Rejections in a row after which the next measurement bypasses the gate.
pub const MAX_CONSECUTIVE_REJECTIONS: usize = 10;

pub type Covariance = SMatrix<f64, ERROR_DIM, ERROR_DIM>;
pub type ErrorVector = SVector<f64, ERROR_DIM>;

pub mod idx {
    pub const P: usize = 0;
    pub const THETA: usize = 3;
    pub const V: usize = 6;
    pub const W: usize = 9;
    pub const F: usize = 12;
    pub const T: usize = 15;
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EkfError {
    #[error("measurement rejected: squared Mahalanobis distance {distance:.3} exceeds {OUTLIER_GATE}")]
    InnovationOutlier { distance: f64 },
    #[error("attitude measurement is 180° from the estimate")]
    Attitude(#[from] So3Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseMeasurement {
    pub time: f64,
    pub position: Vector3<f64>,
    pub attitude: UnitQuaternion,
}

/// Noise model. Process terms are spectral densities per axis, measurement
/// terms are standard deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EkfNoise {
    /// N²/s
    pub force_psd: [f64; 3],
    /// (N·m)²/s
    pub torque_psd: [f64; 3],
    pub position_psd: f64,
    pub attitude_psd: f64,
    pub velocity_psd: f64,
    pub rate_psd: f64,
    /// m
    pub position_std: f64,
    /// rad
    pub attitude_std: f64,
    pub initial_position_std: f64,
    pub initial_attitude_std: f64,
    pub initial_velocity_std: f64,
    pub initial_rate_std: f64,
    pub initial_force_std: f64,
    pub initial_torque_std: f64,
}

impl Default for EkfNoise {
    fn default() -> Self {
        Self {
            force_psd: [0.02f64.powi(2); 3],
            torque_psd: [0.002f64.powi(2); 3],
            position_psd: 1e-8,
            attitude_psd: 1e-8,
            velocity_psd: 1e-4,
            rate_psd: 1e-3,
            position_std: 0.002,
            attitude_std: 0.2f64.to_radians(),
            initial_position_std: 0.01,
            initial_attitude_std: 0.01,
            initial_velocity_std: 0.1,
            initial_rate_std: 0.1,
            initial_force_std: 2.0,
            initial_torque_std: 0.2,
        }
    }
}

impl EkfNoise {
    pub fn validate(&self) -> Result<(), String> {
        let all = self
            .force_psd
            .iter()
            .chain(self.torque_psd.iter())
            .chain([
                &self.position_psd,
                &self.attitude_psd,
                &self.velocity_psd,
                &self.rate_psd,
                &self.initial_position_std,
                &self.initial_attitude_std,
                &self.initial_velocity_std,
                &self.initial_rate_std,
                &self.initial_force_std,
                &self.initial_torque_std,
            ]);
        let mut ok = true;
        for v in all {
            ok &= v.is_finite() && *v >= 0.0;
        }
        if !ok {
            return Err("EKF noise terms must be finite and non-negative".into());
        }
        if !(self.position_std > 0.0 && self.attitude_std > 0.0) {
            return Err("EKF measurement standard deviations must be positive".into());
        }
        Ok(())
    }

    pub fn process_density(&self) -> ErrorVector {
        let mut d = ErrorVector::zeros();
        for i in 0..3 {
            d[idx::P + i] = self.position_psd;
            d[idx::THETA + i] = self.attitude_psd;
            d[idx::V + i] = self.velocity_psd;
            d[idx::W + i] = self.rate_psd;
            d[idx::F + i] = self.force_psd[i];
            d[idx::T + i] = self.torque_psd[i];
        }
        d
    }

    pub fn measurement_covariance(&self) -> SMatrix<f64, 6, 6> {
        let mut r = SMatrix::<f64, 6, 6>::zeros();
        for i in 0..3 {
            r[(i, i)] = self.position_std.powi(2);
            r[(i + 3, i + 3)] = self.attitude_std.powi(2);
        }
        r
    }

    pub fn initial_covariance(&self) -> Covariance {
        let stds = [
            self.initial_position_std,
            self.initial_attitude_std,
            self.initial_velocity_std,
            self.initial_rate_std,
            self.initial_force_std,
            self.initial_torque_std,
        ];
        let mut p = Covariance::zeros();
        for (block, s) in stds.iter().enumerate() {
            for i in 0..3 {
                p[(3 * block + i, 3 * block + i)] = s * s;
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EkfState {
    pub rigid: RigidState,
    /// Residual force in the yaw-local frame.
    pub force_local: Vector3<f64>,
    /// Residual torque in the body frame.
    pub torque: Vector3<f64>,
    pub covariance: Covariance,
}

impl EkfState {
    pub fn new(rigid: RigidState, noise: &EkfNoise) -> Self {
        Self {
            rigid,
            force_local: Vector3::zeros(),
            torque: Vector3::zeros(),
            covariance: noise.initial_covariance(),
        }
    }

    /// Estimated residual wrench in the body frame, `(R_Bᵀ R_z(ψ̂) Δf̂_L, Δτ̂)`.
    pub fn disturbance_in_body(&self) -> Result<Wrench, So3Error> {
        let psi = yaw_of(&self.rigid.attitude)?;
        let r = self.rigid.attitude.to_rotation_matrix();
        let f = r.matrix().transpose() * rz(psi) * self.force_local;
        Ok(Wrench::new(f, self.torque))
    }

    pub fn min_covariance_eigenvalue(&self) -> f64 {
        self.covariance.symmetric_eigenvalues().min()
    }
}

pub fn disturbance_in_body(s: &EkfState) -> Result<Wrench, So3Error> {
    s.disturbance_in_body()
}

fn rz(psi: f64) -> Matrix3<f64> {
    let (s, c) = psi.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Body-frame force of a local-frame force without the gimbal check, used
/// inside the propagation where a well-defined derivative is all that matters.
fn local_to_body(r: &Matrix3<f64>, f_local: &Vector3<f64>) -> Vector3<f64> {
    let psi = r[(1, 0)].atan2(r[(0, 0)]);
    r.transpose() * rz(psi) * f_local
}

/// Continuous-time error-state Jacobian at the estimate.
pub fn error_jacobian(s: &EkfState, params: &InertialParams) -> Covariance {
    let x = &s.rigid;
    let r = *x.attitude.to_rotation_matrix().matrix();
    let v = x.velocity;
    let w = x.angular_velocity;
    let j = params.inertia;
    let j_inv = *params.inertia_inv();

    let d2 = r[(0, 0)].powi(2) + r[(1, 0)].powi(2);
    let psi = r[(1, 0)].atan2(r[(0, 0)]);
    let rz_psi = rz(psi);
    let a = rz_psi * s.force_local;
    let dpsi = if d2 > 1e-12 {
        Vector3::new(
            0.0,
            -(r[(0, 0)] * r[(1, 2)] - r[(1, 0)] * r[(0, 2)]) / d2,
            (r[(0, 0)] * r[(1, 1)] - r[(1, 0)] * r[(0, 1)]) / d2,
        )
    } else {
        Vector3::zeros()
    };
    let df_dtheta = skew(&(r.transpose() * a)) + r.transpose() * skew(&Vector3::z()) * a * dpsi.transpose();

    let mut m = Covariance::zeros();
    let mut put = |row: usize, col: usize, b: &Matrix3<f64>| {
        m.fixed_view_mut::<3, 3>(row, col).copy_from(b);
    };
    put(idx::P, idx::THETA, &(-r * skew(&v)));
    put(idx::P, idx::V, &r);
    put(idx::THETA, idx::THETA, &(-skew(&w)));
    put(idx::THETA, idx::W, &Matrix3::identity());
    put(idx::V, idx::THETA, &(skew(&(r.transpose() * params.gravity)) + df_dtheta / params.mass));
    put(idx::V, idx::V, &(-skew(&w)));
    put(idx::V, idx::W, &skew(&v));
    put(idx::V, idx::F, &(r.transpose() * rz_psi / params.mass));
    put(idx::W, idx::W, &(j_inv * (skew(&(j * w)) - skew(&w) * j)));
    put(idx::W, idx::T, &j_inv);
    m
}

/// Mean propagation only.
pub fn propagate_mean(s: &EkfState, u: &Wrench, dt: f64, params: &InertialParams) -> RigidState {
    let f_local = s.force_local;
    let torque = s.torque;
    let f = |x: &SVector<f64, 13>| {
        let r = rotation_matrix_raw(&[x[3], x[4], x[5], x[6]]);
        let total = *u + Wrench::new(local_to_body(&r, &f_local), torque);
        rigid_rhs(x, &total, params)
    };
    let next = rk4(f, &s.rigid.to_vector(), dt);
    RigidState::from_slice(next.as_slice())
}

pub fn ekf_predict(s: &EkfState, u: &Wrench, dt: f64, noise: &EkfNoise, params: &InertialParams) -> EkfState {
    let a = error_jacobian(s, params) * dt;
    let f = Covariance::identity() + a + a * a * 0.5;
    let qd = Covariance::from_diagonal(&(noise.process_density() * dt));
    let p = f * s.covariance * f.transpose() + qd;
    EkfState {
        rigid: propagate_mean(s, u, dt, params),
        force_local: s.force_local,
        torque: s.torque,
        covariance: (p + p.transpose()) * 0.5,
    }
}

/// Innovation `(p_m − p̂, δθ)` with `δθ` the rotation vector of `q̂⁻¹ ⊗ q_m`.
pub fn innovation(s: &EkfState, z: &PoseMeasurement) -> Result<Vector6<f64>, So3Error> {
    let dtheta = attitude_error(&s.rigid.attitude, &z.attitude)?.to_rotation_vector();
    let dp = z.position - s.rigid.position;
    Ok(Vector6::new(dp.x, dp.y, dp.z, dtheta.x, dtheta.y, dtheta.z))
}

/// Measurement update in Joseph form. An outlier leaves the state untouched
/// and is reported as an error.
pub fn ekf_update(s: &EkfState, z: &PoseMeasurement, noise: &EkfNoise) -> Result<EkfState, EkfError> {
    gated_update(s, z, noise, OUTLIER_GATE)
}

fn gated_update(s: &EkfState, z: &PoseMeasurement, noise: &EkfNoise, gate: f64) -> Result<EkfState, EkfError> {
    let y = innovation(s, z)?;
    let mut h = SMatrix::<f64, 6, ERROR_DIM>::zeros();
    h.fixed_view_mut::<3, 3>(0, idx::P).fill_with_identity();
    h.fixed_view_mut::<3, 3>(3, idx::THETA).fill_with_identity();
    let r = noise.measurement_covariance();
    let p = &s.covariance;
    let innov_cov = h * p * h.transpose() + r;
    let chol = innov_cov
        .cholesky()
        .expect("innovation covariance is positive definite by construction");
    let distance = y.dot(&chol.solve(&y));
    if distance > gate {
        return Err(EkfError::InnovationOutlier { distance });
    }
    let gain = p * h.transpose() * chol.inverse();
    let dx = gain * y;
    let i_kh = Covariance::identity() - gain * h;
    let p_new = i_kh * p * i_kh.transpose() + gain * r * gain.transpose();

    let mut rigid = s.rigid;
    rigid.position += dx.fixed_rows::<3>(idx::P);
    let dq = UnitQuaternion::from_rotation_vector(&dx.fixed_rows::<3>(idx::THETA).into_owned());
    rigid.attitude = rigid.attitude.multiply(&dq);
    rigid.velocity += dx.fixed_rows::<3>(idx::V);
    rigid.angular_velocity += dx.fixed_rows::<3>(idx::W);
    Ok(EkfState {
        rigid,
        force_local: s.force_local + dx.fixed_rows::<3>(idx::F),
        torque: s.torque + dx.fixed_rows::<3>(idx::T),
        covariance: (p_new + p_new.transpose()) * 0.5,
    })
}

/// Stateful wrapper used by the simulator.
#[derive(Debug, Clone)]
pub struct DisturbanceObserver {
    pub state: EkfState,
    pub noise: EkfNoise,
    params: InertialParams,
    rejected: usize,
    consecutive: usize,
}

impl DisturbanceObserver {
    pub fn new(initial: RigidState, noise: EkfNoise, params: InertialParams) -> Self {
        Self {
            state: EkfState::new(initial, &noise),
            noise,
            params,
            rejected: 0,
            consecutive: 0,
        }
    }

    pub fn predict(&mut self, u: &Wrench, dt: f64) {
        self.state = ekf_predict(&self.state, u, dt, &self.noise, &self.params);
    }

    /// Returns whether the measurement was accepted. After
    /// [`MAX_CONSECUTIVE_REJECTIONS`] rejections in a row the covariance is
    /// inflated by the initial covariance and the gate is skipped once, so a
    /// filter that has lost track can recover.
    pub fn update(&mut self, z: &PoseMeasurement) -> bool {
        let gate = if self.consecutive >= MAX_CONSECUTIVE_REJECTIONS {
            self.state.covariance += self.noise.initial_covariance();
            f64::INFINITY
        } else {
            OUTLIER_GATE
        };
        match gated_update(&self.state, z, &self.noise, gate) {
            Ok(s) => {
                self.state = s;
                self.consecutive = 0;
                true
            }
            Err(e) => {
                log::debug!("pose at t={:.3} rejected: {e}", z.time);
                self.rejected += 1;
                self.consecutive += 1;
                false
            }
        }
    }

    pub fn rejected(&self) -> usize {
        self.rejected
    }

    /// Body-frame estimate; falls back to the unrotated local force at ±90° pitch.
    pub fn estimate(&self) -> Wrench {
        self.state.disturbance_in_body().unwrap_or_else(|_| {
            let r = self.state.rigid.attitude.to_rotation_matrix();
            Wrench::new(local_to_body(r.matrix(), &self.state.force_local), self.state.torque)
        })
    }
}

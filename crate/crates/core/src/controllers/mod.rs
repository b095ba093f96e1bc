//! Wrench-level (WMPC) and actuator-level (AMPC) tracking controllers built
//! on the generic NMPC core.

pub mod ampc;
pub mod wmpc;

pub use ampc::{Ampc, AmpcConfig, AmpcModel, AmpcState, AmpcStep};
pub use wmpc::{Wmpc, WmpcConfig, WmpcModel, WmpcState, WmpcStep};

use crate::allocation::{ActuatorCommand, AllocationMatrix};
use crate::dynamics::{layout, InertialParams, RigidState, Wrench};
use crate::so3::{attitude_error, rotation_matrix_raw, So3Error, UnitQuaternion, ANTIPODAL_TOLERANCE};
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

/// Length of the tracking part of the residual.
pub const TRACKING_RESIDUAL_LEN: usize = 12;

/// Pose and twist reference. Linear velocity is world frame, angular velocity
/// is expressed in the reference body frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub time: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude: UnitQuaternion,
    pub angular_velocity: Vector3<f64>,
}

impl ReferencePoint {
    pub fn hover(position: Vector3<f64>, attitude: UnitQuaternion) -> Self {
        Self {
            time: 0.0,
            position,
            velocity: Vector3::zeros(),
            attitude,
            angular_velocity: Vector3::zeros(),
        }
    }

    /// Raw node vector in the rigid-state layout `[p, q, v, ω]`.
    pub fn node_vector(&self) -> DVector<f64> {
        let mut r = DVector::zeros(layout::LEN);
        r.fixed_rows_mut::<3>(layout::P).copy_from(&self.position);
        r.fixed_rows_mut::<4>(layout::Q).copy_from(&self.attitude.coords());
        r.fixed_rows_mut::<3>(layout::V).copy_from(&self.velocity);
        r.fixed_rows_mut::<3>(layout::W).copy_from(&self.angular_velocity);
        r
    }
}

/// How a residual wrench estimate is used by the WMPC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResidualMode {
    /// No correction.
    None,
    /// Residual model prediction enters the prediction dynamics.
    InMpc,
    /// Residual model prediction is subtracted from the optimized wrench.
    PostMpc,
    /// Disturbance observer estimate enters the prediction dynamics.
    Observer,
}

impl ResidualMode {
    pub const ALL: [ResidualMode; 4] = [Self::None, Self::InMpc, Self::PostMpc, Self::Observer];

    /// Short column label used in comparison tables.
    pub fn label(&self) -> &'static str {
        match self {
            Self::None => "N/c",
            Self::InMpc => "In-MPC",
            Self::PostMpc => "Post-MPC",
            Self::Observer => "D/o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingWeights {
    pub position: [f64; 3],
    pub velocity: [f64; 3],
    pub attitude: [f64; 3],
    pub angular_velocity: [f64; 3],
    /// Terminal weight as a multiple of the stage weight.
    pub terminal_scale: f64,
}

impl Default for TrackingWeights {
    fn default() -> Self {
        Self {
            position: [400.0, 400.0, 400.0],
            velocity: [20.0, 20.0, 20.0],
            attitude: [400.0, 400.0, 400.0],
            angular_velocity: [4.0, 4.0, 4.0],
            terminal_scale: 5.0,
        }
    }
}

impl TrackingWeights {
    pub fn diagonal(&self) -> Vec<f64> {
        [self.position, self.velocity, self.attitude, self.angular_velocity].concat()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.diagonal().iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err("tracking weights must be finite and non-negative".into());
        }
        if !(self.terminal_scale.is_finite() && self.terminal_scale >= 0.0) {
            return Err("terminal_scale must be finite and non-negative".into());
        }
        Ok(())
    }
}

/// `(p − p_r, R v − v_r, q_e, ω − RᵀR_r ω_r)` on raw rigid vectors. The
/// quaternion enters scale-invariantly; an antipodal error is regularized so
/// the optimizer always sees a finite residual.
pub fn tracking_residual(x: &[f64], r: &[f64]) -> [f64; TRACKING_RESIDUAL_LEN] {
    let q = [x[3], x[4], x[5], x[6]];
    let norm_sq = q.iter().map(|c| c * c).sum::<f64>();
    let rot = rotation_matrix_raw(&q) / norm_sq;
    let q_ref = [r[3], r[4], r[5], r[6]];
    let rot_ref = rotation_matrix_raw(&q_ref) / q_ref.iter().map(|c| c * c).sum::<f64>();
    let v = Vector3::new(x[7], x[8], x[9]);
    let w = Vector3::new(x[10], x[11], x[12]);
    let v_ref = Vector3::new(r[7], r[8], r[9]);
    let w_ref = Vector3::new(r[10], r[11], r[12]);

    // q⁻¹ ⊗ q_r with q⁻¹ = conj(q) / |q|²; the ratio vec/scalar is scale-free
    let c = [q[0], -q[1], -q[2], -q[3]];
    let e = crate::so3::hamilton(&c, &q_ref);
    let mut s = e[0];
    if s.abs() < ANTIPODAL_TOLERANCE {
        s = ANTIPODAL_TOLERANCE.copysign(s);
    }
    let vel = rot * v - v_ref;
    let rate = w - rot.transpose() * rot_ref * w_ref;
    [
        x[0] - r[0],
        x[1] - r[1],
        x[2] - r[2],
        vel.x,
        vel.y,
        vel.z,
        e[1] / s,
        e[2] / s,
        e[3] / s,
        rate.x,
        rate.y,
        rate.z,
    ]
}

/// Typed form of [`tracking_residual`] that reports an antipodal attitude error.
pub fn rigid_tracking_residual(x: &RigidState, r: &ReferencePoint) -> Result<DVector<f64>, So3Error> {
    attitude_error(&x.attitude, &r.attitude)?;
    let h = tracking_residual(x.to_vector().as_slice(), r.node_vector().as_slice());
    Ok(DVector::from_column_slice(&h))
}

/// Wrench that holds the vehicle against gravity at attitude `q`.
pub fn hover_wrench(q: &UnitQuaternion, params: &InertialParams) -> Wrench {
    Wrench::new(params.hover_force(q), Vector3::zeros())
}

/// Minimum-norm actuator commands for hovering at attitude `q`.
pub fn hover_allocation(q: &UnitQuaternion, params: &InertialParams, alloc: &AllocationMatrix) -> ActuatorCommand {
    alloc.hover_allocation(q, params)
}

/// Symmetric wrench box around a centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrenchBox {
    pub center: Wrench,
    pub half_width: Wrench,
}

impl WrenchBox {
    pub fn lower(&self) -> Wrench {
        self.center - self.half_width
    }

    pub fn upper(&self) -> Wrench {
        self.center + self.half_width
    }

    /// Largest bound violation of `w` (zero when inside).
    pub fn violation(&self, w: &Wrench) -> f64 {
        let d = (w.to_vector() - self.center.to_vector()).abs() - self.half_width.to_vector();
        d.max().max(0.0)
    }

    pub fn clamp(&self, w: &Wrench) -> (Wrench, bool) {
        let (d, saturated) = (*w - self.center).clamp_symmetric(&self.half_width);
        (self.center + d, saturated)
    }
}

/// Post-MPC correction `w* − Δw̄`, clamped back into the wrench box.
/// Returns the corrected wrench and whether the clamp was active.
pub fn post_mpc_correct(w_star: &Wrench, residual: &Wrench, bounds: &WrenchBox) -> (Wrench, bool) {
    bounds.clamp(&(*w_star - *residual))
}

pub(crate) fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::PlatformGeometry;
    use approx::assert_abs_diff_eq;

    fn state_at(r: &ReferencePoint) -> RigidState {
        RigidState {
            position: r.position,
            attitude: r.attitude,
            velocity: r.attitude.inverse().rotate(&r.velocity),
            angular_velocity: r.angular_velocity,
        }
    }

    #[test]
    fn residual_vanishes_on_reference() {
        let r = ReferencePoint {
            time: 0.0,
            position: Vector3::new(1.0, 2.0, 3.0),
            velocity: Vector3::new(0.3, -0.2, 0.1),
            attitude: UnitQuaternion::from_euler_zyx(0.3, -0.2, 1.0),
            angular_velocity: Vector3::new(0.1, 0.2, -0.3),
        };
        let h = rigid_tracking_residual(&state_at(&r), &r).unwrap();
        assert!(h.amax() < 1e-12);
    }

    #[test]
    fn position_offset_shows_up_alone() {
        let r = ReferencePoint::hover(Vector3::zeros(), UnitQuaternion::identity());
        let mut x = state_at(&r);
        x.position.x = 1.0;
        let h = rigid_tracking_residual(&x, &r).unwrap();
        let mut expected = DVector::zeros(12);
        expected[0] = 1.0;
        assert_eq!(h, expected);
    }

    #[test]
    fn aligned_frames_reduce_rate_error() {
        let mut r = ReferencePoint::hover(Vector3::zeros(), UnitQuaternion::from_yaw(0.7));
        r.angular_velocity = Vector3::new(0.0, 0.0, 1.0);
        let mut x = state_at(&r);
        x.angular_velocity = Vector3::new(0.2, 0.0, 0.4);
        let h = rigid_tracking_residual(&x, &r).unwrap();
        assert_abs_diff_eq!(h[9], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(h[11], -0.6, epsilon = 1e-12);
    }

    #[test]
    fn antipodal_attitude_is_reported() {
        let r = ReferencePoint::hover(Vector3::zeros(), UnitQuaternion::identity());
        let mut x = state_at(&r);
        x.attitude = UnitQuaternion::from_wxyz(0.0, 1.0, 0.0, 0.0).unwrap();
        assert_eq!(rigid_tracking_residual(&x, &r), Err(So3Error::AttitudeAntipodal));
    }

    #[test]
    fn hover_allocation_examples() {
        let alloc = AllocationMatrix::new(PlatformGeometry::default()).unwrap();
        let params = InertialParams::default_platform();
        let level = hover_allocation(&UnitQuaternion::identity(), &params, &alloc);
        assert!(level.tilt.amax() < 1e-12);
        assert!(level.thrust.iter().all(|t| (t - 3.565).abs() < 1e-3));

        let q = UnitQuaternion::from_euler_zyx(0.0, 30f64.to_radians(), 0.0);
        let cmd = hover_allocation(&q, &params, &alloc);
        let w = alloc.forward_wrench(&cmd);
        assert!((w - hover_wrench(&q, &params)).to_vector().amax() < 1e-9);

        let weightless = InertialParams::new(4.36, params.inertia, Vector3::zeros()).unwrap();
        let zero = hover_allocation(&q, &weightless, &alloc);
        assert_eq!(zero.thrust.amax(), 0.0);
    }

    #[test]
    fn post_mpc_correction() {
        let bounds = WrenchBox {
            center: Wrench::new(Vector3::new(0.0, 0.0, 42.0), Vector3::zeros()),
            half_width: Wrench::new(Vector3::repeat(20.0), Vector3::repeat(20.0)),
        };
        let w = Wrench::new(Vector3::new(1.0, 0.0, 43.0), Vector3::zeros());
        assert_eq!(post_mpc_correct(&w, &Wrench::zero(), &bounds), (w, false));

        let at_bound = Wrench::new(Vector3::new(20.0, 0.0, 42.0), Vector3::zeros());
        let push = Wrench::new(Vector3::new(-3.0, 0.0, 0.0), Vector3::zeros());
        let (c, saturated) = post_mpc_correct(&at_bound, &push, &bounds);
        assert!(saturated);
        assert_eq!(c.force.x, 20.0);
        assert_eq!(bounds.violation(&c), 0.0);
    }
}

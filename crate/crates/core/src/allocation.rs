//! Static allocation between the body wrench and tilt-rotor commands.
//!
//! Every rotor contributes a lateral and a vertical thrust component. The
//! lateral direction is tangent to the arm circle, so tilting arm `i` by `α_i`
//! moves thrust from body z towards that tangent.

use crate::dynamics::{InertialParams, Wrench};
use crate::so3::UnitQuaternion;
use nalgebra::{DMatrix, DVector, Matrix6, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocationError {
    #[error("geometry yields an allocation matrix of rank {rank} < 6")]
    DegenerateGeometry { rank: usize },
    #[error("allocation matrix is rank deficient, pseudoinverse unavailable")]
    RankDeficient,
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("expected a vector of length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformGeometry {
    pub rotors_per_arm: usize,
    /// Rotor hub position of each arm, body frame, metres. Rotors of one arm are coaxial.
    pub arm_positions: Vec<[f64; 3]>,
    /// Azimuth of each arm; the tilt moves thrust along `(−sin θ, cos θ, 0)`.
    pub arm_azimuths: Vec<f64>,
    /// ±1 per rotor, arm-major order.
    pub spin_directions: Vec<f64>,
    /// Reaction torque per unit thrust, metres.
    pub drag_coefficient: f64,
}

impl Default for PlatformGeometry {
    fn default() -> Self {
        Self::regular(6, 2, 0.3, 0.016)
    }
}

impl PlatformGeometry {
    /// Arms equally spaced on a circle, starting on the body x axis. Both
    /// rotors of an arm share a spin direction and neighbouring arms alternate.
    pub fn regular(arms: usize, rotors_per_arm: usize, radius: f64, drag_coefficient: f64) -> Self {
        let arm_azimuths: Vec<f64> = (0..arms).map(|i| 2.0 * PI * i as f64 / arms as f64).collect();
        let arm_positions = arm_azimuths
            .iter()
            .map(|t| [radius * t.cos(), radius * t.sin(), 0.0])
            .collect();
        let spin_directions = (0..arms * rotors_per_arm)
            .map(|r| if (r / rotors_per_arm) % 2 == 0 { 1.0 } else { -1.0 })
            .collect();
        Self {
            rotors_per_arm,
            arm_positions,
            arm_azimuths,
            spin_directions,
            drag_coefficient,
        }
    }

    pub fn arms(&self) -> usize {
        self.arm_positions.len()
    }

    pub fn rotors(&self) -> usize {
        self.arms() * self.rotors_per_arm
    }

    pub fn arm_of(&self, rotor: usize) -> usize {
        rotor / self.rotors_per_arm
    }

    pub fn validate(&self) -> Result<(), AllocationError> {
        let bad = |m: &str| Err(AllocationError::InvalidGeometry(m.to_string()));
        if self.arms() == 0 || self.rotors_per_arm == 0 {
            return bad("at least one arm with one rotor is required");
        }
        if self.arm_azimuths.len() != self.arms() {
            return bad("arm_azimuths must have one entry per arm");
        }
        if self.spin_directions.len() != self.rotors() {
            return bad("spin_directions must have one entry per rotor");
        }
        if self.spin_directions.iter().any(|s| s.abs() != 1.0) {
            return bad("spin directions must be +1 or -1");
        }
        if !self.drag_coefficient.is_finite() {
            return bad("drag coefficient must be finite");
        }
        let finite = self
            .arm_positions
            .iter()
            .flatten()
            .chain(self.arm_azimuths.iter())
            .all(|c| c.is_finite());
        if !finite {
            return bad("arm positions and azimuths must be finite");
        }
        Ok(())
    }

    fn lateral_direction(&self, arm: usize) -> Vector3<f64> {
        let t = self.arm_azimuths[arm];
        Vector3::new(-t.sin(), t.cos(), 0.0)
    }

    /// Body-frame thrust direction of an arm tilted by `alpha`.
    pub fn thrust_direction(&self, arm: usize, alpha: f64) -> Vector3<f64> {
        self.lateral_direction(arm) * alpha.sin() + Vector3::z() * alpha.cos()
    }

    /// Wrench produced by thrust `f` (body frame) of one rotor.
    pub fn rotor_wrench(&self, rotor: usize, f: &Vector3<f64>) -> Wrench {
        let r = Vector3::from(self.arm_positions[self.arm_of(rotor)]);
        let drag = self.spin_directions[rotor] * self.drag_coefficient;
        Wrench::new(*f, r.cross(f) + f * drag)
    }
}

/// Tilt angles and rotor thrusts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActuatorCommand {
    pub tilt: DVector<f64>,
    pub thrust: DVector<f64>,
}

impl ActuatorCommand {
    pub fn zeros(arms: usize, rotors: usize) -> Self {
        Self {
            tilt: DVector::zeros(arms),
            thrust: DVector::zeros(rotors),
        }
    }

    /// `[α; t]` stacked.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.tilt.len() + self.thrust.len());
        v.rows_mut(0, self.tilt.len()).copy_from(&self.tilt);
        v.rows_mut(self.tilt.len(), self.thrust.len()).copy_from(&self.thrust);
        v
    }

    pub fn from_slice(s: &[f64], arms: usize) -> Self {
        Self {
            tilt: DVector::from_column_slice(&s[..arms]),
            thrust: DVector::from_column_slice(&s[arms..]),
        }
    }

    /// Shifts each tilt angle by a multiple of 2π to lie within π of `reference`.
    pub fn unwrap_towards(&mut self, reference: &DVector<f64>) {
        for (a, r) in self.tilt.iter_mut().zip(reference.iter()) {
            *a = r + wrap_angle(*a - r);
        }
    }
}

/// Wraps into (−π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

/// Constant map from extended thrust `t̃` (interleaved lateral/vertical per rotor) to wrench.
#[derive(Debug, Clone)]
pub struct AllocationMatrix {
    geometry: PlatformGeometry,
    matrix: DMatrix<f64>,
    pinv: DMatrix<f64>,
    rank: usize,
}

pub fn build_allocation_matrix(geometry: &PlatformGeometry) -> Result<AllocationMatrix, AllocationError> {
    AllocationMatrix::new(geometry.clone())
}

impl AllocationMatrix {
    pub fn new(geometry: PlatformGeometry) -> Result<Self, AllocationError> {
        geometry.validate()?;
        let n = geometry.rotors();
        let mut matrix = DMatrix::zeros(6, 2 * n);
        for rotor in 0..n {
            let arm = geometry.arm_of(rotor);
            let lateral = geometry.rotor_wrench(rotor, &geometry.lateral_direction(arm));
            let vertical = geometry.rotor_wrench(rotor, &Vector3::z());
            matrix.column_mut(2 * rotor).copy_from(&lateral.to_vector());
            matrix.column_mut(2 * rotor + 1).copy_from(&vertical.to_vector());
        }
        let svd = matrix.clone().svd(true, true);
        let smax = svd.singular_values.max();
        let rank = svd
            .singular_values
            .iter()
            .filter(|s| **s > RANK_TOLERANCE * smax.max(f64::MIN_POSITIVE))
            .count();
        if rank < 6 {
            return Err(AllocationError::DegenerateGeometry { rank });
        }
        let pinv = svd
            .pseudo_inverse(RANK_TOLERANCE * smax)
            .map_err(|_| AllocationError::RankDeficient)?;
        Ok(Self {
            geometry,
            matrix,
            pinv,
            rank,
        })
    }

    pub fn geometry(&self) -> &PlatformGeometry {
        &self.geometry
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn pseudo_inverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn arms(&self) -> usize {
        self.geometry.arms()
    }

    pub fn rotors(&self) -> usize {
        self.geometry.rotors()
    }

    /// `I − A⁺A`.
    pub fn nullspace_projector(&self) -> DMatrix<f64> {
        let n = self.matrix.ncols();
        DMatrix::identity(n, n) - &self.pinv * &self.matrix
    }

    pub fn wrench_of_extended(&self, extended: &DVector<f64>) -> Wrench {
        let w = &self.matrix * extended;
        Wrench::from_slice(w.as_slice())
    }

    /// `t̃(α, t)` with components `(sin α t, cos α t)` per rotor.
    pub fn extended_thrust(&self, cmd: &ActuatorCommand) -> DVector<f64> {
        let mut e = DVector::zeros(2 * self.rotors());
        for rotor in 0..self.rotors() {
            let a = cmd.tilt[self.geometry.arm_of(rotor)];
            e[2 * rotor] = a.sin() * cmd.thrust[rotor];
            e[2 * rotor + 1] = a.cos() * cmd.thrust[rotor];
        }
        e
    }

    /// Exact nonlinear forward map `w = A t̃(α, t)`.
    pub fn forward_wrench(&self, cmd: &ActuatorCommand) -> Wrench {
        self.wrench_of_extended(&self.extended_thrust(cmd))
    }

    /// Jacobian of [`forward_wrench`](Self::forward_wrench) with respect to `[α; t]`.
    pub fn forward_jacobian(&self, cmd: &ActuatorCommand) -> DMatrix<f64> {
        let (na, nr) = (self.arms(), self.rotors());
        let mut jac = DMatrix::zeros(6, na + nr);
        for rotor in 0..nr {
            let arm = self.geometry.arm_of(rotor);
            let (s, c) = cmd.tilt[arm].sin_cos();
            let lat = self.matrix.column(2 * rotor);
            let ver = self.matrix.column(2 * rotor + 1);
            let t = cmd.thrust[rotor];
            let mut col = jac.column_mut(arm);
            col += (lat * c - ver * s) * t;
            jac.column_mut(na + rotor).copy_from(&(lat * s + ver * c));
        }
        jac
    }

    /// Minimum-norm allocation plus the nullspace component selected by `b`.
    pub fn allocate(
        &self,
        w: &Wrench,
        b: Option<&DVector<f64>>,
    ) -> Result<(ActuatorCommand, DVector<f64>), AllocationError> {
        let mut extended = &self.pinv * w.to_vector();
        if let Some(b) = b {
            if b.len() != self.matrix.ncols() {
                return Err(AllocationError::Dimension {
                    expected: self.matrix.ncols(),
                    got: b.len(),
                });
            }
            extended += self.nullspace_projector() * b;
        }
        Ok((self.command_from_extended(&extended), extended))
    }

    /// Tilt from the per-arm summed components, thrust as per-rotor magnitude.
    pub fn command_from_extended(&self, extended: &DVector<f64>) -> ActuatorCommand {
        let mut cmd = ActuatorCommand::zeros(self.arms(), self.rotors());
        let mut lateral = vec![0.0; self.arms()];
        let mut vertical = vec![0.0; self.arms()];
        for rotor in 0..self.rotors() {
            let arm = self.geometry.arm_of(rotor);
            let (fl, fv) = (extended[2 * rotor], extended[2 * rotor + 1]);
            lateral[arm] += fl;
            vertical[arm] += fv;
            cmd.thrust[rotor] = fl.hypot(fv);
        }
        for arm in 0..self.arms() {
            cmd.tilt[arm] = if lateral[arm] == 0.0 && vertical[arm] == 0.0 {
                0.0
            } else {
                lateral[arm].atan2(vertical[arm])
            };
        }
        cmd
    }

    /// Minimum-norm commands `(α*, t*)` that hold the vehicle at attitude `q`.
    pub fn hover_allocation(&self, q: &UnitQuaternion, params: &InertialParams) -> ActuatorCommand {
        let w = Wrench::new(params.hover_force(q), Vector3::zeros());
        self.allocate(&w, None).expect("pseudoinverse precomputed").0
    }

    /// `A Aᵀ`, useful for conditioning checks.
    pub fn gram(&self) -> Matrix6<f64> {
        let g = &self.matrix * self.matrix.transpose();
        Matrix6::from_iterator(g.iter().copied())
    }

    pub fn wrench_vector(&self, cmd: &ActuatorCommand) -> Vector6<f64> {
        self.forward_wrench(cmd).to_vector()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn default_alloc() -> AllocationMatrix {
        AllocationMatrix::new(PlatformGeometry::default()).unwrap()
    }

    /// Sum of per-rotor force and moment, written from scratch.
    fn wrench_oracle(geom: &PlatformGeometry, extended: &DVector<f64>) -> Vector6<f64> {
        let mut f = Vector3::zeros();
        let mut tau = Vector3::zeros();
        for rotor in 0..geom.rotors() {
            let arm = rotor / geom.rotors_per_arm;
            let theta = geom.arm_azimuths[arm];
            let tangent = Vector3::new(-theta.sin(), theta.cos(), 0.0);
            let fr = tangent * extended[2 * rotor] + Vector3::new(0.0, 0.0, extended[2 * rotor + 1]);
            let p = Vector3::from(geom.arm_positions[arm]);
            f += fr;
            tau += p.cross(&fr) + fr * (geom.spin_directions[rotor] * geom.drag_coefficient);
        }
        Vector6::new(f.x, f.y, f.z, tau.x, tau.y, tau.z)
    }

    fn random_wrench(rng: &mut ChaCha8Rng) -> Wrench {
        let v = Vector6::from_fn(|_, _| rng.random_range(-20.0..20.0));
        Wrench::from_vector(&v)
    }

    #[test]
    fn single_rotor_at_origin() {
        let geom = PlatformGeometry {
            rotors_per_arm: 1,
            arm_positions: vec![[0.0; 3]],
            arm_azimuths: vec![0.0],
            spin_directions: vec![1.0],
            drag_coefficient: 0.016,
        };
        // rank 2 only; inspect the columns directly
        assert!(matches!(
            AllocationMatrix::new(geom.clone()),
            Err(AllocationError::DegenerateGeometry { rank: 2 })
        ));
        let w = geom.rotor_wrench(0, &Vector3::z());
        assert_eq!(w.force, Vector3::z());
        assert_eq!(w.torque, Vector3::new(0.0, 0.0, 0.016));
    }

    #[test]
    fn counter_rotating_pair_cancels_drag() {
        let geom = PlatformGeometry {
            spin_directions: vec![1.0, -1.0],
            rotors_per_arm: 2,
            arm_positions: vec![[0.0; 3]],
            arm_azimuths: vec![0.0],
            drag_coefficient: 0.016,
        };
        let f = Vector3::new(0.0, 0.0, 3.0);
        let total = geom.rotor_wrench(0, &f) + geom.rotor_wrench(1, &f);
        assert_eq!(total.torque, Vector3::zeros());
    }

    #[test]
    fn matrix_matches_per_rotor_summation() {
        let alloc = default_alloc();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let e = DVector::from_fn(24, |_, _| rng.random_range(-5.0..5.0));
            let w = alloc.wrench_of_extended(&e).to_vector();
            assert!((w - wrench_oracle(alloc.geometry(), &e)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn default_geometry_is_full_rank_with_18_dim_nullspace() {
        let alloc = default_alloc();
        assert_eq!(alloc.rank(), 6);
        let p = alloc.nullspace_projector();
        let rank = p.svd(false, false).singular_values.iter().filter(|s| **s > 1e-9).count();
        assert_eq!(rank, 18);
    }

    #[test]
    fn uniform_vertical_thrust_gives_pure_lift() {
        let alloc = default_alloc();
        let cmd = ActuatorCommand {
            tilt: DVector::zeros(6),
            thrust: DVector::from_element(12, 2.5),
        };
        let w = alloc.forward_wrench(&cmd);
        assert_abs_diff_eq!(w.force, Vector3::new(0.0, 0.0, 30.0), epsilon = 1e-12);
        assert!(w.torque.norm() < 1e-12);
        let zero = ActuatorCommand::zeros(6, 12);
        assert_eq!(alloc.forward_wrench(&zero), Wrench::zero());
    }

    #[test]
    fn hover_allocation_is_uniform() {
        let alloc = default_alloc();
        let params = InertialParams::default_platform();
        let cmd = alloc.hover_allocation(&UnitQuaternion::identity(), &params);
        let per_rotor = 4.36 * 9.81 / 12.0;
        for a in cmd.tilt.iter() {
            assert!(a.abs() < 1e-12);
        }
        for t in cmd.thrust.iter() {
            assert_abs_diff_eq!(*t, per_rotor, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(per_rotor, 3.565, epsilon = 1e-3);
    }

    #[test]
    fn zero_wrench_allocates_zero() {
        let alloc = default_alloc();
        let (cmd, e) = alloc.allocate(&Wrench::zero(), None).unwrap();
        assert_eq!(e, DVector::zeros(24));
        assert_eq!(cmd, ActuatorCommand::zeros(6, 12));
    }

    #[test]
    fn nullspace_component_produces_no_wrench() {
        let alloc = default_alloc();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = DVector::from_fn(24, |_, _| rng.random_range(-3.0..3.0));
        let (_, e) = alloc.allocate(&Wrench::zero(), Some(&b)).unwrap();
        assert!(e.norm() > 1e-3);
        assert!(alloc.wrench_of_extended(&e).to_vector().norm() < 1e-10);
        assert!(matches!(
            alloc.allocate(&Wrench::zero(), Some(&DVector::zeros(3))),
            Err(AllocationError::Dimension { .. })
        ));
    }

    #[test]
    fn round_trip_over_settings_box() {
        let alloc = default_alloc();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let w = random_wrench(&mut rng);
            let (cmd, _) = alloc.allocate(&w, None).unwrap();
            let back = alloc.forward_wrench(&cmd);
            assert!((back.to_vector() - w.to_vector()).abs().max() < 1e-9);
        }
    }

    #[test]
    fn minimum_norm_beats_nullspace_shifts() {
        let alloc = default_alloc();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let w = random_wrench(&mut rng);
            let (_, e0) = alloc.allocate(&w, None).unwrap();
            for _ in 0..100 {
                let b = DVector::from_fn(24, |_, _| rng.random_range(-5.0..5.0));
                let (_, eb) = alloc.allocate(&w, Some(&b)).unwrap();
                assert!(e0.norm() <= eb.norm() + 1e-12);
            }
        }
    }

    #[test]
    fn forward_jacobian_matches_differences() {
        let alloc = default_alloc();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cmd = ActuatorCommand {
            tilt: DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0)),
            thrust: DVector::from_fn(12, |_, _| rng.random_range(0.5..6.0)),
        };
        let jac = alloc.forward_jacobian(&cmd);
        let x = cmd.to_vector();
        let h = 1e-6;
        for i in 0..18 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let d = (alloc.wrench_vector(&ActuatorCommand::from_slice(xp.as_slice(), 6))
                - alloc.wrench_vector(&ActuatorCommand::from_slice(xm.as_slice(), 6)))
                / (2.0 * h);
            assert!((d - jac.column(i)).abs().max() < 1e-7, "column {i}");
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI / 2.0), -PI / 2.0, epsilon = 1e-12);
        let mut cmd = ActuatorCommand {
            tilt: DVector::from_vec(vec![3.0]),
            thrust: DVector::zeros(2),
        };
        cmd.unwrap_towards(&DVector::from_vec(vec![-3.0]));
        assert_abs_diff_eq!(cmd.tilt[0], 3.0 - 2.0 * PI, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn thrust_norm_equivalence(
            fx in -20.0..20.0f64, fy in -20.0..20.0f64, fz in -20.0..20.0f64,
            tx in -20.0..20.0f64, ty in -20.0..20.0f64, tz in -20.0..20.0f64,
        ) {
            let alloc = default_alloc();
            let w = Wrench::new(Vector3::new(fx, fy, fz), Vector3::new(tx, ty, tz));
            let (cmd, e) = alloc.allocate(&w, None).unwrap();
            prop_assert!((e.norm_squared() - cmd.thrust.norm_squared()).abs() < 1e-9);
            prop_assert!(cmd.thrust.iter().all(|t| *t >= 0.0));
            prop_assert!(cmd.tilt.iter().all(|a| *a > -PI && *a <= PI));
        }
    }
}

//! Wrench-level MPC: the actuator wrench is part of the state and its rate
//! is the decision variable.

use super::{diag, hover_wrench, tracking_residual, ReferencePoint, TrackingWeights, WrenchBox, TRACKING_RESIDUAL_LEN};
use crate::dynamics::{normalize_quaternion_block, rigid_rhs, rigid_rhs_jacobian, InertialParams, RigidState, RigidVector, Wrench};
use crate::nmpc::{NmpcError, OcpModel, OcpProblem, OcpSolution, RtiSolver, SolverSettings};
use crate::so3::UnitQuaternion;
use nalgebra::{DMatrix, DVector, SMatrix, SVector, Vector3};
use serde::{Deserialize, Serialize};
use std::time::Duration;

pub const STATE_LEN: usize = 19;
pub const INPUT_LEN: usize = 6;
const RIGID: usize = 6;

type Vec19 = SVector<f64, STATE_LEN>;
type Mat19 = SMatrix<f64, STATE_LEN, STATE_LEN>;
type Mat19x6 = SMatrix<f64, STATE_LEN, INPUT_LEN>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub force_max: f64,
    pub torque_max: f64,
    pub force_rate_max: f64,
    pub torque_rate_max: f64,
    pub tracking: TrackingWeights,
    pub force_rate_weight: f64,
    pub torque_rate_weight: f64,
}

impl Default for WmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 20,
            dt: 0.05,
            force_max: 20.0,
            torque_max: 20.0,
            force_rate_max: 1000.0,
            torque_rate_max: 1000.0,
            tracking: TrackingWeights::default(),
            force_rate_weight: 1e-5,
            torque_rate_weight: 1e-5,
        }
    }
}

impl WmpcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err("horizon and dt must be positive".into());
        }
        let positive = [
            self.force_max,
            self.torque_max,
            self.force_rate_max,
            self.torque_rate_max,
            self.force_rate_weight,
            self.torque_rate_weight,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("wrench bounds and rate weights must be positive".into());
        }
        self.tracking.validate()
    }

    pub fn limits(&self) -> Wrench {
        Wrench::new(Vector3::repeat(self.force_max), Vector3::repeat(self.torque_max))
    }

    pub fn rate_limits(&self) -> Wrench {
        Wrench::new(Vector3::repeat(self.force_rate_max), Vector3::repeat(self.torque_rate_max))
    }
}

/// Wrench plus rigid state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmpcState {
    pub wrench: Wrench,
    pub rigid: RigidState,
}

impl WmpcState {
    pub fn to_vector(&self) -> DVector<f64> {
        let mut x = DVector::zeros(STATE_LEN);
        x.rows_mut(0, 6).copy_from(&self.wrench.to_vector());
        x.rows_mut(RIGID, 13).copy_from(&self.rigid.to_vector());
        x
    }

    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            wrench: Wrench::from_slice(&x[..6]),
            rigid: RigidState::from_slice(&x[RIGID..]),
        }
    }
}

/// Prediction model `ẇ = u`, rigid body driven by `w + Δw`.
#[derive(Debug, Clone)]
pub struct WmpcModel {
    pub params: InertialParams,
    /// Constant body-frame residual wrench used over the whole horizon.
    pub residual: Wrench,
}

impl WmpcModel {
    fn rhs(&self, z: &Vec19, u: &SVector<f64, 6>) -> Vec19 {
        let rigid = RigidVector::from_column_slice(&z.as_slice()[RIGID..]);
        let w = Wrench::from_slice(&z.as_slice()[..6]) + self.residual;
        let d = rigid_rhs(&rigid, &w, &self.params);
        let mut out = Vec19::zeros();
        out.fixed_rows_mut::<6>(0).copy_from(u);
        out.fixed_rows_mut::<13>(RIGID).copy_from(&d);
        out
    }

    fn rhs_jacobian(&self, z: &Vec19) -> Mat19 {
        let rigid = RigidVector::from_column_slice(&z.as_slice()[RIGID..]);
        let (a, b) = rigid_rhs_jacobian(&rigid, &self.params);
        let mut f = Mat19::zeros();
        f.fixed_view_mut::<13, 6>(RIGID, 0).copy_from(&b);
        f.fixed_view_mut::<13, 13>(RIGID, RIGID).copy_from(&a);
        f
    }

    fn input_matrix() -> Mat19x6 {
        let mut b = Mat19x6::zeros();
        b.fixed_view_mut::<6, 6>(0, 0).fill_with_identity();
        b
    }
}

impl OcpModel for WmpcModel {
    fn nx(&self) -> usize {
        STATE_LEN
    }

    fn nu(&self) -> usize {
        INPUT_LEN
    }

    fn nh(&self) -> usize {
        TRACKING_RESIDUAL_LEN
    }

    fn discrete(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let z = Vec19::from_column_slice(x.as_slice());
        let u = SVector::<f64, 6>::from_column_slice(u.as_slice());
        let next = crate::dynamics::rk4(|s| self.rhs(s, &u), &z, dt);
        DVector::from_column_slice(next.as_slice())
    }

    /// Exact derivative of the RK4 map through its four stages.
    fn discrete_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let z = Vec19::from_column_slice(x.as_slice());
        let u = SVector::<f64, 6>::from_column_slice(u.as_slice());
        let fu = Self::input_matrix();
        let id = Mat19::identity();
        let h = dt;

        let k1 = self.rhs(&z, &u);
        let j1 = self.rhs_jacobian(&z);
        let (d1x, d1u) = (j1, fu);

        let z2 = z + k1 * (h / 2.0);
        let k2 = self.rhs(&z2, &u);
        let j2 = self.rhs_jacobian(&z2);
        let d2x = j2 * (id + d1x * (h / 2.0));
        let d2u = j2 * (d1u * (h / 2.0)) + fu;

        let z3 = z + k2 * (h / 2.0);
        let k3 = self.rhs(&z3, &u);
        let j3 = self.rhs_jacobian(&z3);
        let d3x = j3 * (id + d2x * (h / 2.0));
        let d3u = j3 * (d2u * (h / 2.0)) + fu;

        let z4 = z + k3 * h;
        let j4 = self.rhs_jacobian(&z4);
        let d4x = j4 * (id + d3x * h);
        let d4u = j4 * (d3u * h) + fu;

        let a = id + (d1x + d2x * 2.0 + d3x * 2.0 + d4x) * (h / 6.0);
        let b = (d1u + d2u * 2.0 + d3u * 2.0 + d4u) * (h / 6.0);
        (
            DMatrix::from_column_slice(STATE_LEN, STATE_LEN, a.as_slice()),
            DMatrix::from_column_slice(STATE_LEN, INPUT_LEN, b.as_slice()),
        )
    }

    fn project(&self, x: &mut DVector<f64>) {
        normalize_quaternion_block(x.as_mut_slice(), RIGID + 3);
    }

    fn residual(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&tracking_residual(&x.as_slice()[RIGID..], reference.as_slice()))
    }
}

/// Result of one WMPC control tick.
#[derive(Debug, Clone)]
pub struct WmpcStep {
    pub wrench_rate: Wrench,
    /// Predicted wrench at every shooting node, starting with the current one.
    pub predicted_wrench: Vec<Wrench>,
    pub bounds: WrenchBox,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
    pub solve_time: Duration,
}

/// Receding-horizon wrench controller with warm-started real-time iterations.
#[derive(Debug, Clone)]
pub struct Wmpc {
    solver: RtiSolver<WmpcModel>,
    cfg: WmpcConfig,
    shift_fraction: f64,
    started: bool,
}

impl Wmpc {
    /// `control_period` is the time between calls to [`step`](Self::step).
    pub fn new(
        cfg: WmpcConfig,
        params: InertialParams,
        settings: SolverSettings,
        control_period: f64,
    ) -> Result<Self, NmpcError> {
        cfg.validate().map_err(NmpcError::InvalidProblem)?;
        let q = diag(&cfg.tracking.diagonal());
        let q_terminal = &q * cfg.tracking.terminal_scale;
        let r = diag(&[
            cfg.force_rate_weight,
            cfg.force_rate_weight,
            cfg.force_rate_weight,
            cfg.torque_rate_weight,
            cfg.torque_rate_weight,
            cfg.torque_rate_weight,
        ]);
        let model = WmpcModel {
            params,
            residual: Wrench::zero(),
        };
        let mut problem = OcpProblem::new(model, cfg.horizon, cfg.dt, q, q_terminal, r);
        let rate = cfg.rate_limits().to_vector();
        for i in 0..6 {
            problem.u_lower[i] = -rate[i];
            problem.u_upper[i] = rate[i];
        }
        Ok(Self {
            solver: RtiSolver::new(problem, settings)?,
            shift_fraction: control_period / cfg.dt,
            cfg,
            started: false,
        })
    }

    pub fn config(&self) -> &WmpcConfig {
        &self.cfg
    }

    pub fn params(&self) -> &InertialParams {
        &self.solver.problem.model.params
    }

    pub fn reset(&mut self) {
        self.solver.reset();
        self.started = false;
    }

    /// Wrench box centred on the hover wrench at `attitude`; the controllers
    /// use the reference attitude of the current node.
    pub fn wrench_box(&self, attitude: &UnitQuaternion) -> WrenchBox {
        WrenchBox {
            center: hover_wrench(attitude, self.params()),
            half_width: self.cfg.limits(),
        }
    }

    /// Samples `horizon + 1` reference nodes starting at `t0` from `reference`.
    pub fn reference_nodes<F: Fn(f64) -> ReferencePoint>(&self, t0: f64, reference: F) -> Vec<ReferencePoint> {
        (0..=self.cfg.horizon).map(|k| reference(t0 + k as f64 * self.cfg.dt)).collect()
    }

    /// One control tick. `residual` enters the prediction dynamics; pass zero
    /// for the uncorrected and Post-MPC variants.
    pub fn step(
        &mut self,
        x: &RigidState,
        current_wrench: &Wrench,
        refs: &[ReferencePoint],
        residual: &Wrench,
    ) -> Result<WmpcStep, NmpcError> {
        if refs.len() != self.cfg.horizon + 1 {
            return Err(NmpcError::InvalidProblem(format!(
                "expected {} reference nodes, got {}",
                self.cfg.horizon + 1,
                refs.len()
            )));
        }
        if self.started {
            self.solver.shift(self.shift_fraction);
        }
        self.started = true;
        let bounds = self.wrench_box(&refs[0].attitude);
        let (lo, hi) = (bounds.lower().to_vector(), bounds.upper().to_vector());
        let w_now = current_wrench.to_vector();
        let problem = &mut self.solver.problem;
        problem.model.residual = *residual;
        for i in 0..6 {
            // never demand an immediate jump back into a box that moved with the attitude
            problem.x_lower[i] = lo[i].min(w_now[i]);
            problem.x_upper[i] = hi[i].max(w_now[i]);
        }
        let x_now = WmpcState {
            wrench: *current_wrench,
            rigid: *x,
        }
        .to_vector();
        let nodes: Vec<DVector<f64>> = refs.iter().map(|r| r.node_vector()).collect();
        let sol = self.solver.step(&x_now, &nodes)?;
        Ok(Self::summarize(&sol, bounds))
    }

    /// Full-convergence solve at a fixed state, for tests and diagnostics.
    pub fn solve_converged(
        &mut self,
        x: &RigidState,
        current_wrench: &Wrench,
        refs: &[ReferencePoint],
        residual: &Wrench,
    ) -> Result<WmpcStep, NmpcError> {
        self.solver.problem.model.residual = *residual;
        let bounds = self.wrench_box(&refs[0].attitude);
        let (lo, hi) = (bounds.lower().to_vector(), bounds.upper().to_vector());
        for i in 0..6 {
            self.solver.problem.x_lower[i] = lo[i];
            self.solver.problem.x_upper[i] = hi[i];
        }
        let x_now = WmpcState {
            wrench: *current_wrench,
            rigid: *x,
        }
        .to_vector();
        let nodes: Vec<DVector<f64>> = refs.iter().map(|r| r.node_vector()).collect();
        let sol = self.solver.solve(&x_now, &nodes)?;
        Ok(Self::summarize(&sol, bounds))
    }

    fn summarize(sol: &OcpSolution, bounds: WrenchBox) -> WmpcStep {
        WmpcStep {
            wrench_rate: Wrench::from_slice(sol.inputs[0].as_slice()),
            predicted_wrench: sol.states.iter().map(|x| Wrench::from_slice(&x.as_slice()[..6])).collect(),
            bounds,
            qp_iterations: sol.qp_iterations,
            kkt_residual: sol.kkt_residual,
            objective: sol.objective,
            solve_time: sol.solve_time,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::rk4_step;
    use crate::so3::UnitQuaternion;

    fn model() -> WmpcModel {
        WmpcModel {
            params: InertialParams::default_platform(),
            residual: Wrench::new(Vector3::new(0.3, -0.2, 1.0), Vector3::new(0.01, 0.0, -0.02)),
        }
    }

    fn sample_state() -> DVector<f64> {
        WmpcState {
            wrench: Wrench::new(Vector3::new(2.0, -1.0, 44.0), Vector3::new(0.2, -0.1, 0.05)),
            rigid: RigidState {
                position: Vector3::new(0.1, 0.2, 0.3),
                attitude: UnitQuaternion::from_euler_zyx(0.3, -0.2, 0.8),
                velocity: Vector3::new(0.5, -0.3, 0.1),
                angular_velocity: Vector3::new(0.4, -0.6, 0.9),
            },
        }
        .to_vector()
    }

    #[test]
    fn analytic_jacobians_match_central_differences() {
        let m = model();
        let x = sample_state();
        let u = DVector::from_vec(vec![10.0, -5.0, 3.0, 1.0, -0.5, 0.2]);
        let (a, b) = m.discrete_jacobians(&x, &u, 0.05);
        let h = 1e-6;
        for i in 0..STATE_LEN {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let col = (m.discrete(&xp, &u, 0.05) - m.discrete(&xm, &u, 0.05)) / (2.0 * h);
            let err = (col - a.column(i)).amax();
            assert!(err <= 1e-5 * a.amax().max(1.0), "state column {i}: {err}");
        }
        for i in 0..INPUT_LEN {
            let mut up = u.clone();
            let mut um = u.clone();
            up[i] += h;
            um[i] -= h;
            let col = (m.discrete(&x, &up, 0.05) - m.discrete(&x, &um, 0.05)) / (2.0 * h);
            assert!((col - b.column(i)).amax() <= 1e-5 * b.amax().max(1.0), "input column {i}");
        }
    }

    #[test]
    fn discrete_map_matches_rigid_integrator_at_zero_rate() {
        let m = model();
        let x = sample_state();
        let next = m.discrete(&x, &DVector::zeros(6), 0.01);
        let s = WmpcState::from_slice(x.as_slice());
        let oracle = rk4_step(&s.rigid, &s.wrench, &m.residual, &m.params, 0.01);
        let got = WmpcState::from_slice(next.as_slice());
        assert_eq!(got.wrench, s.wrench);
        assert!((got.rigid.to_vector() - oracle.to_vector()).amax() < 1e-12);
    }

    fn hover_refs(cfg: &WmpcConfig, p: Vector3<f64>) -> Vec<ReferencePoint> {
        vec![ReferencePoint::hover(p, UnitQuaternion::identity()); cfg.horizon + 1]
    }

    #[test]
    fn hover_at_reference_is_stationary() {
        let params = InertialParams::default_platform();
        let mut c = Wmpc::new(WmpcConfig::default(), params.clone(), SolverSettings::default(), 0.01).unwrap();
        let x = RigidState::default();
        let w = hover_wrench(&x.attitude, &params);
        let refs = hover_refs(c.config(), Vector3::zeros());
        let out = c.solve_converged(&x, &w, &refs, &Wrench::zero()).unwrap();
        assert!(out.wrench_rate.to_vector().norm() < 1e-6);
    }

    #[test]
    fn position_offset_pulls_towards_reference() {
        let params = InertialParams::default_platform();
        let mut c = Wmpc::new(WmpcConfig::default(), params.clone(), SolverSettings::default(), 0.01).unwrap();
        let x = RigidState::default();
        let w = hover_wrench(&x.attitude, &params);
        let refs = hover_refs(c.config(), Vector3::new(0.5, 0.0, 0.0));
        let out = c.solve_converged(&x, &w, &refs, &Wrench::zero()).unwrap();
        assert!(out.wrench_rate.force.x > 0.0);
        for pw in &out.predicted_wrench[1..] {
            assert!(out.bounds.violation(pw) < 1e-6);
        }
    }

    #[test]
    fn none_and_zero_residual_agree_bitwise() {
        let params = InertialParams::default_platform();
        let mk = || Wmpc::new(WmpcConfig::default(), params.clone(), SolverSettings::default(), 0.01).unwrap();
        let (mut a, mut b) = (mk(), mk());
        let x = RigidState::at_rest(Vector3::new(0.1, 0.0, -0.1), UnitQuaternion::from_yaw(0.2));
        let w = hover_wrench(&x.attitude, &params);
        let refs = hover_refs(a.config(), Vector3::zeros());
        let ra = a.step(&x, &w, &refs, &Wrench::zero()).unwrap();
        let rb = b.step(&x, &w, &refs, &-Wrench::zero()).unwrap();
        assert_eq!(ra.wrench_rate, rb.wrench_rate);
        assert_eq!(ra.predicted_wrench, rb.predicted_wrench);
    }

    #[test]
    fn in_mpc_residual_shifts_hover_wrench() {
        let params = InertialParams::default_platform();
        let mut c = Wmpc::new(WmpcConfig::default(), params.clone(), SolverSettings::default(), 0.01).unwrap();
        let residual = Wrench::new(Vector3::new(0.0, 0.0, -2.0), Vector3::zeros());
        let mut x = RigidState::default();
        let mut w = hover_wrench(&x.attitude, &params);
        let refs = hover_refs(c.config(), Vector3::zeros());
        // closed loop with the residual acting on the plant as well
        for _ in 0..400 {
            let out = c.step(&x, &w, &refs, &residual).unwrap();
            for _ in 0..10 {
                w += Wrench::new(out.wrench_rate.force * 1e-3, out.wrench_rate.torque * 1e-3);
                x = rk4_step(&x, &w, &residual, &params, 1e-3);
            }
        }
        assert!((w.force.z - (params.mass * 9.81 + 2.0)).abs() < 1e-3, "{}", w.force.z);
        assert!(x.position.norm() < 1e-3);
    }
}

//! Actuator-level MPC: tilt angles and rotor thrusts are states, their rates
//! are the decision variables, and the allocation is part of the prediction.

use super::{
    diag, hover_allocation, hover_wrench, tracking_residual, ReferencePoint, TrackingWeights, WrenchBox,
    TRACKING_RESIDUAL_LEN,
};
use crate::allocation::{ActuatorCommand, AllocationMatrix};
use crate::dynamics::{normalize_quaternion_block, rigid_rhs, InertialParams, RigidState, RigidVector, Wrench};
use crate::nmpc::{NmpcError, OcpModel, OcpProblem, OcpSolution, RtiSolver, SolverSettings};
use crate::so3::UnitQuaternion;
use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmpcConfig {
    pub horizon: usize,
    pub dt: f64,
    pub force_max: f64,
    pub torque_max: f64,
    pub tilt_rate_max: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub thrust_rate_max: f64,
    pub tracking: TrackingWeights,
    /// `w_T` on `t − t*`.
    pub thrust_weight: f64,
    /// `w_α` on `α − α*`.
    pub tilt_weight: f64,
    /// `w_α̇` on the tilt rates.
    pub tilt_rate_weight: f64,
    pub thrust_rate_weight: f64,
}

impl Default for AmpcConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            dt: 0.05,
            force_max: 20.0,
            torque_max: 20.0,
            tilt_rate_max: 10.0,
            thrust_min: 0.1,
            thrust_max: 16.0,
            thrust_rate_max: 29.0,
            tracking: TrackingWeights::default(),
            thrust_weight: 1.0,
            tilt_weight: 10.0,
            tilt_rate_weight: 10.0,
            thrust_rate_weight: 0.1,
        }
    }
}

impl AmpcConfig {
    /// The low actuator-weight tuning (`w_T = 0.1`, `w_α = 0.1`, `w_α̇ = 10`).
    pub fn low_actuator_weights() -> Self {
        Self {
            thrust_weight: 0.1,
            tilt_weight: 0.1,
            tilt_rate_weight: 10.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 || !(self.dt > 0.0) {
            return Err("horizon and dt must be positive".into());
        }
        let positive = [
            self.force_max,
            self.torque_max,
            self.tilt_rate_max,
            self.thrust_max,
            self.thrust_rate_max,
            self.tilt_rate_weight,
            self.thrust_rate_weight,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err("actuator bounds and rate weights must be positive".into());
        }
        if !(self.thrust_min >= 0.0 && self.thrust_min < self.thrust_max) {
            return Err("thrust_min must lie in [0, thrust_max)".into());
        }
        if !(self.thrust_weight >= 0.0 && self.tilt_weight >= 0.0) {
            return Err("actuator weights must be non-negative".into());
        }
        self.tracking.validate()
    }
}

/// Actuator commands plus rigid state.
#[derive(Debug, Clone, PartialEq)]
pub struct AmpcState {
    pub command: ActuatorCommand,
    pub rigid: RigidState,
}

impl AmpcState {
    pub fn to_vector(&self) -> DVector<f64> {
        let c = self.command.to_vector();
        let mut x = DVector::zeros(c.len() + 13);
        x.rows_mut(0, c.len()).copy_from(&c);
        x.rows_mut(c.len(), 13).copy_from(&self.rigid.to_vector());
        x
    }

    pub fn from_slice(x: &[f64], arms: usize) -> Self {
        let n = x.len() - 13;
        Self {
            command: ActuatorCommand::from_slice(&x[..n], arms),
            rigid: RigidState::from_slice(&x[n..]),
        }
    }
}

/// Prediction model `α̇ = u_α`, `ṫ = u_t`, rigid body driven by `A t̃(α, t) + Δw`.
#[derive(Debug, Clone)]
pub struct AmpcModel {
    pub params: InertialParams,
    pub alloc: AllocationMatrix,
    pub residual: Wrench,
}

impl AmpcModel {
    fn actuators(&self) -> usize {
        self.alloc.arms() + self.alloc.rotors()
    }

    fn rhs(&self, z: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let na = self.actuators();
        let cmd = ActuatorCommand::from_slice(&z.as_slice()[..na], self.alloc.arms());
        let w = self.alloc.forward_wrench(&cmd) + self.residual;
        let rigid = RigidVector::from_column_slice(&z.as_slice()[na..]);
        let d = rigid_rhs(&rigid, &w, &self.params);
        let mut out = DVector::zeros(na + 13);
        out.rows_mut(0, na).copy_from(u);
        out.rows_mut(na, 13).copy_from(&d);
        out
    }
}

impl OcpModel for AmpcModel {
    fn nx(&self) -> usize {
        self.actuators() + 13
    }

    fn nu(&self) -> usize {
        self.actuators()
    }

    fn nh(&self) -> usize {
        TRACKING_RESIDUAL_LEN + self.actuators()
    }

    fn discrete(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64> {
        let k1 = self.rhs(x, u);
        let k2 = self.rhs(&(x + &k1 * (dt / 2.0)), u);
        let k3 = self.rhs(&(x + &k2 * (dt / 2.0)), u);
        let k4 = self.rhs(&(x + &k3 * dt), u);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
    }

    fn project(&self, x: &mut DVector<f64>) {
        let offset = self.actuators() + 3;
        normalize_quaternion_block(x.as_mut_slice(), offset);
    }

    /// Reference layout: rigid node vector followed by `α*` and `t*`.
    fn residual(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64> {
        let na = self.actuators();
        let mut h = DVector::zeros(self.nh());
        let track = tracking_residual(&x.as_slice()[na..], &reference.as_slice()[..13]);
        h.rows_mut(0, TRACKING_RESIDUAL_LEN).copy_from_slice(&track);
        for i in 0..na {
            h[TRACKING_RESIDUAL_LEN + i] = x[i] - reference[13 + i];
        }
        h
    }

    fn residual_jacobian(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DMatrix<f64> {
        // actuator rows are the identity; only the tracking block needs differences
        let na = self.actuators();
        let mut jac = DMatrix::zeros(self.nh(), x.len());
        let rigid = &x.as_slice()[na..];
        let r = &reference.as_slice()[..13];
        let mut xp = rigid.to_vec();
        for i in 0..13 {
            let h = 1e-6 * rigid[i].abs().max(1.0);
            xp[i] = rigid[i] + h;
            let up = tracking_residual(&xp, r);
            xp[i] = rigid[i] - h;
            let dn = tracking_residual(&xp, r);
            xp[i] = rigid[i];
            for k in 0..TRACKING_RESIDUAL_LEN {
                jac[(k, na + i)] = (up[k] - dn[k]) / (2.0 * h);
            }
        }
        for i in 0..na {
            jac[(TRACKING_RESIDUAL_LEN + i, i)] = 1.0;
        }
        jac
    }

    /// The allocated wrench, bounded by the wrench box.
    fn nc(&self) -> usize {
        6
    }

    fn path_constraint(&self, x: &DVector<f64>) -> DVector<f64> {
        let cmd = ActuatorCommand::from_slice(&x.as_slice()[..self.actuators()], self.alloc.arms());
        DVector::from_column_slice(self.alloc.forward_wrench(&cmd).to_vector().as_slice())
    }

    fn path_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let na = self.actuators();
        let cmd = ActuatorCommand::from_slice(&x.as_slice()[..na], self.alloc.arms());
        let mut jac = DMatrix::zeros(6, x.len());
        jac.columns_mut(0, na).copy_from(&self.alloc.forward_jacobian(&cmd));
        jac
    }
}

#[derive(Debug, Clone)]
pub struct AmpcStep {
    pub tilt_rate: DVector<f64>,
    pub thrust_rate: DVector<f64>,
    /// Minimum-norm hover commands used as the actuator reference.
    pub reference_command: ActuatorCommand,
    pub predicted_commands: Vec<ActuatorCommand>,
    pub bounds: WrenchBox,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
    pub objective: f64,
    pub solve_time: Duration,
}

/// Receding-horizon actuator controller.
#[derive(Debug, Clone)]
pub struct Ampc {
    solver: RtiSolver<AmpcModel>,
    cfg: AmpcConfig,
    shift_fraction: f64,
    started: bool,
}

impl Ampc {
    pub fn new(
        cfg: AmpcConfig,
        params: InertialParams,
        alloc: AllocationMatrix,
        settings: SolverSettings,
        control_period: f64,
    ) -> Result<Self, NmpcError> {
        cfg.validate().map_err(NmpcError::InvalidProblem)?;
        let (na, nr) = (alloc.arms(), alloc.rotors());
        let mut qd = cfg.tracking.diagonal();
        qd.extend(std::iter::repeat_n(cfg.tilt_weight, na));
        qd.extend(std::iter::repeat_n(cfg.thrust_weight, nr));
        let q = diag(&qd);
        let q_terminal = &q * cfg.tracking.terminal_scale;
        let mut rd = vec![cfg.tilt_rate_weight; na];
        rd.extend(std::iter::repeat_n(cfg.thrust_rate_weight, nr));
        let r = diag(&rd);
        let model = AmpcModel {
            params,
            alloc,
            residual: Wrench::zero(),
        };
        let mut problem = OcpProblem::new(model, cfg.horizon, cfg.dt, q, q_terminal, r);
        for i in 0..na {
            problem.u_lower[i] = -cfg.tilt_rate_max;
            problem.u_upper[i] = cfg.tilt_rate_max;
        }
        for i in na..na + nr {
            problem.u_lower[i] = -cfg.thrust_rate_max;
            problem.u_upper[i] = cfg.thrust_rate_max;
            problem.x_lower[i] = cfg.thrust_min;
            problem.x_upper[i] = cfg.thrust_max;
        }
        Ok(Self {
            solver: RtiSolver::new(problem, settings)?,
            shift_fraction: control_period / cfg.dt,
            cfg,
            started: false,
        })
    }

    pub fn config(&self) -> &AmpcConfig {
        &self.cfg
    }

    pub fn alloc(&self) -> &AllocationMatrix {
        &self.solver.problem.model.alloc
    }

    pub fn params(&self) -> &InertialParams {
        &self.solver.problem.model.params
    }

    pub fn reset(&mut self) {
        self.solver.reset();
        self.started = false;
    }

    /// Wrench box centred on the hover wrench at `attitude`.
    pub fn wrench_box(&self, attitude: &UnitQuaternion) -> WrenchBox {
        WrenchBox {
            center: hover_wrench(attitude, self.params()),
            half_width: ampc_wrench_limits(&self.cfg),
        }
    }

    /// Hover allocation at the current attitude, with thrusts lifted to the
    /// lower bound and tilt angles unwrapped towards `current`.
    pub fn reference_command(&self, x: &RigidState, current: &ActuatorCommand) -> ActuatorCommand {
        let mut star = hover_allocation(&x.attitude, self.params(), self.alloc());
        star.unwrap_towards(&current.tilt);
        star
    }

    /// One control tick; `residual` is the observer estimate (zero if none).
    pub fn step(
        &mut self,
        x: &RigidState,
        current: &ActuatorCommand,
        refs: &[ReferencePoint],
        residual: &Wrench,
    ) -> Result<AmpcStep, NmpcError> {
        if self.started {
            self.solver.shift(self.shift_fraction);
        }
        self.started = true;
        self.run(x, current, refs, residual, false)
    }

    /// Full-convergence solve at a fixed state.
    pub fn solve_converged(
        &mut self,
        x: &RigidState,
        current: &ActuatorCommand,
        refs: &[ReferencePoint],
        residual: &Wrench,
    ) -> Result<AmpcStep, NmpcError> {
        self.run(x, current, refs, residual, true)
    }

    fn run(
        &mut self,
        x: &RigidState,
        current: &ActuatorCommand,
        refs: &[ReferencePoint],
        residual: &Wrench,
        converge: bool,
    ) -> Result<AmpcStep, NmpcError> {
        if refs.len() != self.cfg.horizon + 1 {
            return Err(NmpcError::InvalidProblem(format!(
                "expected {} reference nodes, got {}",
                self.cfg.horizon + 1,
                refs.len()
            )));
        }
        let star = self.reference_command(x, current);
        let na = self.alloc().arms();
        let nact = na + self.alloc().rotors();
        // a thrust below the box (only possible at start-up) widens the box for this tick
        for i in na..nact {
            self.solver.problem.x_lower[i] = self.cfg.thrust_min.min(current.thrust[i - na]);
            self.solver.problem.x_upper[i] = self.cfg.thrust_max.max(current.thrust[i - na]);
        }
        let bounds = self.wrench_box(&refs[0].attitude);
        let (lo, hi) = (bounds.lower().to_vector(), bounds.upper().to_vector());
        let w_now = self.alloc().forward_wrench(current).to_vector();
        for i in 0..6 {
            self.solver.problem.c_lower[i] = lo[i].min(w_now[i]);
            self.solver.problem.c_upper[i] = hi[i].max(w_now[i]);
        }
        self.solver.problem.model.residual = *residual;
        let star_vec = star.to_vector();
        let nodes: Vec<DVector<f64>> = refs
            .iter()
            .map(|r| {
                let mut v = DVector::zeros(13 + nact);
                v.rows_mut(0, 13).copy_from(&r.node_vector());
                v.rows_mut(13, nact).copy_from(&star_vec);
                v
            })
            .collect();
        let x_now = AmpcState {
            command: current.clone(),
            rigid: *x,
        }
        .to_vector();
        let sol = if converge {
            self.solver.solve(&x_now, &nodes)?
        } else {
            self.solver.step(&x_now, &nodes)?
        };
        Ok(self.summarize(&sol, star, bounds))
    }

    fn summarize(&self, sol: &OcpSolution, star: ActuatorCommand, bounds: WrenchBox) -> AmpcStep {
        let na = self.alloc().arms();
        let u0 = &sol.inputs[0];
        AmpcStep {
            tilt_rate: u0.rows(0, na).into_owned(),
            thrust_rate: u0.rows(na, u0.len() - na).into_owned(),
            reference_command: star,
            predicted_commands: sol
                .states
                .iter()
                .map(|x| AmpcState::from_slice(x.as_slice(), na).command)
                .collect(),
            bounds,
            qp_iterations: sol.qp_iterations,
            kkt_residual: sol.kkt_residual,
            objective: sol.objective,
            solve_time: sol.solve_time,
        }
    }
}

/// Hover-level wrench limits used when reporting the AMPC wrench.
pub fn ampc_wrench_limits(cfg: &AmpcConfig) -> Wrench {
    Wrench::new(Vector3::repeat(cfg.force_max), Vector3::repeat(cfg.torque_max))
}

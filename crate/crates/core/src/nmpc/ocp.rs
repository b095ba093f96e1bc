//! Multiple-shooting transcription of a least-squares optimal control problem,
//! condensed to the inputs and solved by Gauss-Newton real-time iterations.

use super::qp::{kkt_report, solve_qp, KktReport, QpError, QpProblem, QpSettings};
use nalgebra::{DMatrix, DVector};
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NmpcError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("linearization produced non-finite values at node {0}")]
    NonFiniteLinearization(usize),
    #[error(transparent)]
    Qp(#[from] QpError),
}

/// Discrete dynamics `x⁺ = g(x, u)` and a tracking residual `h(x, r)`.
pub trait OcpModel {
    fn nx(&self) -> usize;
    fn nu(&self) -> usize;
    /// Length of the residual vector.
    fn nh(&self) -> usize;

    fn discrete(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> DVector<f64>;

    /// `(∂g/∂x, ∂g/∂u)`; forward differences unless overridden.
    fn discrete_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        forward_difference_jacobians(self, x, u, dt)
    }

    /// Maps an updated iterate back onto the state manifold.
    fn project(&self, _x: &mut DVector<f64>) {}

    fn residual(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DVector<f64>;

    /// `∂h/∂x`; central differences unless overridden.
    fn residual_jacobian(&self, x: &DVector<f64>, reference: &DVector<f64>) -> DMatrix<f64> {
        let nh = self.nh();
        let mut jac = DMatrix::zeros(nh, x.len());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = self.residual(&xp, reference);
            xp[i] = x[i] - h;
            let dn = self.residual(&xp, reference);
            xp[i] = x[i];
            jac.column_mut(i).copy_from(&((up - dn) / (2.0 * h)));
        }
        jac
    }

    /// Number of nonlinear path constraints `c_lo ≤ c(x) ≤ c_hi` on nodes `1..=N`.
    fn nc(&self) -> usize {
        0
    }

    fn path_constraint(&self, _x: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(0)
    }

    /// `∂c/∂x`; central differences unless overridden.
    fn path_jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(self.nc(), x.len());
        let mut xp = x.clone();
        for i in 0..x.len() {
            let h = 1e-6 * x[i].abs().max(1.0);
            xp[i] = x[i] + h;
            let up = self.path_constraint(&xp);
            xp[i] = x[i] - h;
            let dn = self.path_constraint(&xp);
            xp[i] = x[i];
            jac.column_mut(i).copy_from(&((up - dn) / (2.0 * h)));
        }
        jac
    }
}

/// Forward-difference Jacobians with step `1e-6 · max(1, |z|)`.
pub fn forward_difference_jacobians<M: OcpModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let g0 = model.discrete(x, u, dt);
    let mut a = DMatrix::zeros(g0.len(), x.len());
    let mut b = DMatrix::zeros(g0.len(), u.len());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let h = 1e-6 * x[i].abs().max(1.0);
        xp[i] = x[i] + h;
        a.column_mut(i).copy_from(&((model.discrete(&xp, u, dt) - &g0) / h));
        xp[i] = x[i];
    }
    let mut up = u.clone();
    for i in 0..u.len() {
        let h = 1e-6 * u[i].abs().max(1.0);
        up[i] = u[i] + h;
        b.column_mut(i).copy_from(&((model.discrete(x, &up, dt) - &g0) / h));
        up[i] = u[i];
    }
    (a, b)
}

/// Horizon, weights and box constraints around an [`OcpModel`].
///
/// The cost is `Σ_{k<N} (‖h_k‖²_Q + ‖u_k‖²_R) + ‖h_N‖²_{Q_N}`. State bounds
/// and path constraints apply to nodes `1..=N`; node 0 is the measured state.
#[derive(Debug, Clone)]
pub struct OcpProblem<M> {
    pub model: M,
    pub horizon: usize,
    pub dt: f64,
    pub q: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x_lower: DVector<f64>,
    pub x_upper: DVector<f64>,
    pub u_lower: DVector<f64>,
    pub u_upper: DVector<f64>,
    pub c_lower: DVector<f64>,
    pub c_upper: DVector<f64>,
}

impl<M: OcpModel> OcpProblem<M> {
    /// Unbounded problem with the given weights.
    pub fn new(model: M, horizon: usize, dt: f64, q: DMatrix<f64>, q_terminal: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        let (nx, nu, nc) = (model.nx(), model.nu(), model.nc());
        Self {
            model,
            horizon,
            dt,
            q,
            q_terminal,
            r,
            x_lower: DVector::from_element(nx, f64::NEG_INFINITY),
            x_upper: DVector::from_element(nx, f64::INFINITY),
            u_lower: DVector::from_element(nu, f64::NEG_INFINITY),
            u_upper: DVector::from_element(nu, f64::INFINITY),
            c_lower: DVector::from_element(nc, f64::NEG_INFINITY),
            c_upper: DVector::from_element(nc, f64::INFINITY),
        }
    }

    pub fn validate(&self) -> Result<(), NmpcError> {
        let bad = |m: &str| Err(NmpcError::InvalidProblem(m.to_string()));
        let (nx, nu, nh) = (self.model.nx(), self.model.nu(), self.model.nh());
        if self.horizon == 0 || !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad("horizon and dt must be positive");
        }
        if self.q.shape() != (nh, nh) || self.q_terminal.shape() != (nh, nh) || self.r.shape() != (nu, nu) {
            return bad("weight matrix dimensions do not match the model");
        }
        for (name, w) in [("Q", &self.q), ("Q_N", &self.q_terminal)] {
            if !is_symmetric(w) || w.clone().symmetric_eigenvalues().min() < -1e-10 {
                return Err(NmpcError::InvalidProblem(format!("{name} must be symmetric positive semidefinite")));
            }
        }
        if !is_symmetric(&self.r) || self.r.clone().cholesky().is_none() {
            return bad("R must be symmetric positive definite");
        }
        if self.x_lower.len() != nx
            || self.x_upper.len() != nx
            || self.u_lower.len() != nu
            || self.u_upper.len() != nu
            || self.c_lower.len() != self.model.nc()
            || self.c_upper.len() != self.model.nc()
        {
            return bad("bound dimensions do not match the model");
        }
        let ordered = self.x_lower.iter().zip(self.x_upper.iter()).all(|(l, u)| l <= u)
            && self.u_lower.iter().zip(self.u_upper.iter()).all(|(l, u)| l <= u)
            && self.c_lower.iter().zip(self.c_upper.iter()).all(|(l, u)| l <= u);
        if !ordered {
            return bad("lower bounds must not exceed upper bounds");
        }
        Ok(())
    }

    /// Cost of a trajectory pair.
    pub fn objective(&self, xs: &[DVector<f64>], us: &[DVector<f64>], refs: &[DVector<f64>]) -> f64 {
        let n = self.horizon;
        let mut cost = 0.0;
        for k in 0..n {
            let h = self.model.residual(&xs[k], &refs[k]);
            cost += h.dot(&(&self.q * &h)) + us[k].dot(&(&self.r * &us[k]));
        }
        let h = self.model.residual(&xs[n], &refs[n]);
        cost + h.dot(&(&self.q_terminal * &h))
    }

    /// Largest shooting gap `‖g(x_k, u_k) − x_{k+1}‖∞`.
    pub fn max_gap(&self, xs: &[DVector<f64>], us: &[DVector<f64>]) -> f64 {
        (0..self.horizon)
            .map(|k| (self.model.discrete(&xs[k], &us[k], self.dt) - &xs[k + 1]).amax())
            .fold(0.0, f64::max)
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    (m - m.transpose()).amax() <= 1e-12 * m.amax().max(1.0)
}

/// Condensed QP in the input increments together with the affine state map
/// `δx_k = G_k δU + e_k` needed to recover the state update.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    pub state_sensitivity: Vec<DMatrix<f64>>,
    pub state_offset: Vec<DVector<f64>>,
}

/// Linearizes around `(xs, us)` with the initial state fixed to `x_now`.
pub fn linearize<M: OcpModel>(
    problem: &OcpProblem<M>,
    x_now: &DVector<f64>,
    xs: &[DVector<f64>],
    us: &[DVector<f64>],
    refs: &[DVector<f64>],
) -> Result<CondensedQp, NmpcError> {
    let n = problem.horizon;
    let model = &problem.model;
    let (nx, nu) = (model.nx(), model.nu());
    if xs.len() != n + 1 || us.len() != n || refs.len() != n + 1 || x_now.len() != nx {
        return Err(NmpcError::InvalidProblem("guess or reference length does not match the horizon".into()));
    }
    let nv = n * nu;
    let mut hessian = DMatrix::zeros(nv, nv);
    let mut gradient = DVector::zeros(nv);
    let mut sens = Vec::with_capacity(n + 1);
    let mut offs = Vec::with_capacity(n + 1);
    sens.push(DMatrix::zeros(nx, nv));
    offs.push(x_now - &xs[0]);

    let bounded: Vec<usize> = (0..nx)
        .filter(|&i| problem.x_lower[i].is_finite() || problem.x_upper[i].is_finite())
        .collect();
    let constrained: Vec<usize> = (0..model.nc())
        .filter(|&i| problem.c_lower[i].is_finite() || problem.c_upper[i].is_finite())
        .collect();
    let per_node = bounded.len() + constrained.len();
    let mut rows = DMatrix::zeros(n * per_node, nv);
    let mut row_lower = DVector::zeros(n * per_node);
    let mut row_upper = DVector::zeros(n * per_node);

    for k in 0..n {
        let (a, b) = model.discrete_jacobians(&xs[k], &us[k], problem.dt);
        let gap = model.discrete(&xs[k], &us[k], problem.dt) - &xs[k + 1];
        if a.iter().chain(b.iter()).chain(gap.iter()).any(|v| !v.is_finite()) {
            return Err(NmpcError::NonFiniteLinearization(k));
        }
        let cols = k * nu;
        let mut g_next = DMatrix::zeros(nx, nv);
        if cols > 0 {
            let prev = sens[k].columns(0, cols);
            g_next.columns_mut(0, cols).copy_from(&(&a * prev));
        }
        g_next.columns_mut(cols, nu).copy_from(&b);
        let e_next = &a * &offs[k] + gap;

        // stage k + 1 cost: Gauss-Newton model of ‖h̄ + J δx‖²_W
        let node = k + 1;
        let weight = if node == n { &problem.q_terminal } else { &problem.q };
        let xbar = &xs[node];
        let h = model.residual(xbar, &refs[node]);
        let jac = model.residual_jacobian(xbar, &refs[node]);
        if jac.iter().chain(h.iter()).any(|v| !v.is_finite()) {
            return Err(NmpcError::NonFiniteLinearization(node));
        }
        let wj = weight * &jac;
        let m = jac.transpose() * &wj;
        let c = wj.transpose() * (&h + &jac * &e_next);
        let active_cols = cols + nu;
        let g_act = g_next.columns(0, active_cols);
        let mg = &m * g_act;
        let mut h_block = hessian.view_mut((0, 0), (active_cols, active_cols));
        h_block.gemm_tr(2.0, &g_act, &mg, 1.0);
        let mut g_block = gradient.rows_mut(0, active_cols);
        g_block.gemv_tr(2.0, &g_act, &c, 1.0);

        for (j, &i) in bounded.iter().enumerate() {
            let row = k * per_node + j;
            rows.row_mut(row).copy_from(&g_next.row(i));
            let base = xbar[i] + e_next[i];
            row_lower[row] = problem.x_lower[i] - base;
            row_upper[row] = problem.x_upper[i] - base;
        }
        if !constrained.is_empty() {
            let cbar = model.path_constraint(xbar);
            let cjac = model.path_jacobian(xbar);
            if cbar.iter().chain(cjac.iter()).any(|v| !v.is_finite()) {
                return Err(NmpcError::NonFiniteLinearization(node));
            }
            let cg = &cjac * &g_next;
            let ce = &cjac * &e_next;
            for (j, &i) in constrained.iter().enumerate() {
                let row = k * per_node + bounded.len() + j;
                rows.row_mut(row).copy_from(&cg.row(i));
                let base = cbar[i] + ce[i];
                row_lower[row] = problem.c_lower[i] - base;
                row_upper[row] = problem.c_upper[i] - base;
            }
        }
        sens.push(g_next);
        offs.push(e_next);
    }

    let mut lower = DVector::zeros(nv);
    let mut upper = DVector::zeros(nv);
    for k in 0..n {
        let s = k * nu;
        let mut hb = hessian.view_mut((s, s), (nu, nu));
        hb += &problem.r * 2.0;
        let mut gb = gradient.rows_mut(s, nu);
        gb += &problem.r * &us[k] * 2.0;
        for i in 0..nu {
            lower[s + i] = problem.u_lower[i] - us[k][i];
            upper[s + i] = problem.u_upper[i] - us[k][i];
        }
    }
    // the rank updates only fill the lower-right blocks consistently; enforce symmetry
    let hessian = (&hessian + hessian.transpose()) * 0.5;
    let qp = QpProblem::unconstrained(hessian, gradient)
        .with_bounds(lower, upper)
        .with_rows(rows, row_lower, row_upper);
    Ok(CondensedQp {
        qp,
        state_sensitivity: sens,
        state_offset: offs,
    })
}

#[derive(Debug, Clone)]
pub struct SolverSettings {
    pub qp: QpSettings,
    /// SQP iterations in [`RtiSolver::solve`].
    pub max_sqp_iterations: usize,
    pub sqp_tolerance: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            qp: QpSettings::default(),
            max_sqp_iterations: 50,
            sqp_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub objective: f64,
    /// `max(‖δU‖∞, max shooting gap)` after the last iteration.
    pub kkt_residual: f64,
    pub qp_kkt: KktReport,
    pub qp_iterations: usize,
    pub sqp_iterations: usize,
    pub solve_time: Duration,
}

/// Stateful real-time-iteration solver with warm start.
#[derive(Debug, Clone)]
pub struct RtiSolver<M> {
    pub problem: OcpProblem<M>,
    pub settings: SolverSettings,
    guess: Option<(Vec<DVector<f64>>, Vec<DVector<f64>>)>,
}

impl<M: OcpModel> RtiSolver<M> {
    pub fn new(problem: OcpProblem<M>, settings: SolverSettings) -> Result<Self, NmpcError> {
        problem.validate()?;
        Ok(Self {
            problem,
            settings,
            guess: None,
        })
    }

    pub fn reset(&mut self) {
        self.guess = None;
    }

    pub fn guess(&self) -> Option<&(Vec<DVector<f64>>, Vec<DVector<f64>>)> {
        self.guess.as_ref()
    }

    pub fn set_guess(&mut self, xs: Vec<DVector<f64>>, us: Vec<DVector<f64>>) {
        self.guess = Some((xs, us));
    }

    fn cold_start(&self, x_now: &DVector<f64>) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let p = &self.problem;
        let u0 = DVector::from_fn(p.model.nu(), |i, _| 0.0_f64.clamp(p.u_lower[i], p.u_upper[i]));
        (vec![x_now.clone(); p.horizon + 1], vec![u0; p.horizon])
    }

    /// Advances the warm start by `fraction` of a shooting interval by linear
    /// interpolation between neighbouring nodes. The last state is blended
    /// towards its one-step prediction and the last input is held.
    pub fn shift(&mut self, fraction: f64) {
        let Some((xs, us)) = self.guess.as_mut() else { return };
        let f = fraction.clamp(0.0, 1.0);
        if f == 0.0 {
            return;
        }
        let n = us.len();
        let tail = self.problem.model.discrete(&xs[n], &us[n - 1], self.problem.dt);
        for k in 0..n {
            let next = xs[k + 1].clone();
            xs[k] = &xs[k] * (1.0 - f) + next * f;
        }
        xs[n] = &xs[n] * (1.0 - f) + tail * f;
        for k in 0..n - 1 {
            let next = us[k + 1].clone();
            us[k] = &us[k] * (1.0 - f) + next * f;
        }
        for x in xs.iter_mut() {
            self.problem.model.project(x);
        }
    }

    /// One Gauss-Newton iteration from the stored warm start.
    pub fn step(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<OcpSolution, NmpcError> {
        self.iterate(x_now, refs, 1, 0.0)
    }

    /// Iterates to `settings.sqp_tolerance` (full-convergence mode).
    pub fn solve(&mut self, x_now: &DVector<f64>, refs: &[DVector<f64>]) -> Result<OcpSolution, NmpcError> {
        let (iters, tol) = (self.settings.max_sqp_iterations, self.settings.sqp_tolerance);
        self.iterate(x_now, refs, iters, tol)
    }

    fn iterate(
        &mut self,
        x_now: &DVector<f64>,
        refs: &[DVector<f64>],
        max_iterations: usize,
        tolerance: f64,
    ) -> Result<OcpSolution, NmpcError> {
        let start = Instant::now();
        let (mut xs, mut us) = match self.guess.take() {
            Some(g) if g.0.len() == self.problem.horizon + 1 => g,
            _ => self.cold_start(x_now),
        };
        let mut qp_iterations = 0;
        let mut sqp_iterations = 0;
        let mut kkt_residual = f64::INFINITY;
        let mut qp_kkt = KktReport {
            stationarity: 0.0,
            feasibility: 0.0,
            complementarity: 0.0,
        };
        while sqp_iterations < max_iterations.max(1) {
            let condensed = match linearize(&self.problem, x_now, &xs, &us, refs) {
                Ok(c) => c,
                Err(e) => {
                    self.guess = Some((xs, us));
                    return Err(e);
                }
            };
            let sol = match solve_qp(&condensed.qp, &self.settings.qp) {
                Ok(s) => s,
                Err(e) => {
                    self.guess = Some((xs, us));
                    return Err(e.into());
                }
            };
            qp_kkt = kkt_report(&condensed.qp, &sol);
            qp_iterations += sol.iterations;
            sqp_iterations += 1;
            let nu = self.problem.model.nu();
            for (k, u) in us.iter_mut().enumerate() {
                *u += sol.x.rows(k * nu, nu);
            }
            for (k, x) in xs.iter_mut().enumerate() {
                *x += &condensed.state_sensitivity[k] * &sol.x + &condensed.state_offset[k];
                self.problem.model.project(x);
            }
            xs[0] = x_now.clone();
            kkt_residual = sol.x.amax().max(self.problem.max_gap(&xs, &us));
            if kkt_residual <= tolerance {
                break;
            }
        }
        let objective = self.problem.objective(&xs, &us, refs);
        self.guess = Some((xs.clone(), us.clone()));
        Ok(OcpSolution {
            states: xs,
            inputs: us,
            objective,
            kkt_residual,
            qp_kkt,
            qp_iterations,
            sqp_iterations,
            solve_time: start.elapsed(),
        })
    }
}

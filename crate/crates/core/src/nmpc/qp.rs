//! Dense strictly convex QP solver (Goldfarb-Idnani dual active set).
//!
//! minimize ½ xᵀHx + gᵀx subject to variable bounds and two-sided rows
//! `l ≤ Cx ≤ u`. Infinite bounds are ignored.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QpError {
    #[error("QP is infeasible (constraint {constraint} cannot be satisfied)")]
    Infeasible { constraint: usize },
    #[error("QP did not converge within {0} iterations")]
    MaxIterations(usize),
    #[error("Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP data has inconsistent dimensions")]
    Dimension,
    #[error("QP data is not finite")]
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub rows: DMatrix<f64>,
    pub row_lower: DVector<f64>,
    pub row_upper: DVector<f64>,
}

impl QpProblem {
    pub fn unconstrained(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        Self {
            hessian,
            gradient,
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
            rows: DMatrix::zeros(0, n),
            row_lower: DVector::zeros(0),
            row_upper: DVector::zeros(0),
        }
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn with_rows(mut self, rows: DMatrix<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.rows = rows;
        self.row_lower = lower;
        self.row_upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    fn validate(&self) -> Result<(), QpError> {
        let n = self.dim();
        let m = self.rows.nrows();
        if self.hessian.shape() != (n, n)
            || self.lower.len() != n
            || self.upper.len() != n
            || self.rows.ncols() != n
            || self.row_lower.len() != m
            || self.row_upper.len() != m
        {
            return Err(QpError::Dimension);
        }
        let finite = self.hessian.iter().chain(self.gradient.iter()).chain(self.rows.iter());
        if !finite.into_iter().all(|v| v.is_finite()) {
            return Err(QpError::NonFinite);
        }
        let nan_bounds = self
            .lower
            .iter()
            .chain(self.upper.iter())
            .chain(self.row_lower.iter())
            .chain(self.row_upper.iter())
            .any(|v| v.is_nan());
        if nan_bounds {
            return Err(QpError::NonFinite);
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(QpError::Infeasible { constraint: i });
            }
        }
        for i in 0..m {
            if self.row_lower[i] > self.row_upper[i] {
                return Err(QpError::Infeasible { constraint: n + i });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QpSettings {
    pub max_iterations: usize,
    /// Constraint violation below this (scaled by the bound magnitude) counts as satisfied.
    pub feasibility_tolerance: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            feasibility_tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Bound multipliers, positive on an active upper bound and negative on a lower one.
    pub bound_multipliers: DVector<f64>,
    pub row_multipliers: DVector<f64>,
    pub iterations: usize,
    pub active: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

/// One-sided constraint `sign · (row · x) ≥ sign · bound`.
#[derive(Debug, Clone, Copy)]
struct Constraint {
    source: Source,
    upper: bool,
    bound: f64,
}

#[derive(Debug, Clone, Copy)]
enum Source {
    Var(usize),
    Row(usize),
}

impl Constraint {
    fn sign(&self) -> f64 {
        if self.upper {
            -1.0
        } else {
            1.0
        }
    }

    fn normal(&self, qp: &QpProblem) -> DVector<f64> {
        let n = qp.dim();
        let mut v = match self.source {
            Source::Var(i) => {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            }
            Source::Row(r) => qp.rows.row(r).transpose(),
        };
        v *= self.sign();
        v
    }

    fn slack(&self, qp: &QpProblem, x: &DVector<f64>) -> f64 {
        let ax = match self.source {
            Source::Var(i) => x[i],
            Source::Row(r) => qp.rows.row(r).dot(&x.transpose()),
        };
        self.sign() * (ax - self.bound)
    }
}

fn one_sided(qp: &QpProblem) -> Vec<Constraint> {
    let mut out = Vec::new();
    let sides = |source, lo: f64, hi: f64, out: &mut Vec<Constraint>| {
        if lo.is_finite() {
            out.push(Constraint { source, upper: false, bound: lo });
        }
        if hi.is_finite() {
            out.push(Constraint { source, upper: true, bound: hi });
        }
    };
    for i in 0..qp.dim() {
        sides(Source::Var(i), qp.lower[i], qp.upper[i], &mut out);
    }
    for r in 0..qp.rows.nrows() {
        sides(Source::Row(r), qp.row_lower[r], qp.row_upper[r], &mut out);
    }
    out
}

/// Solves the QP. `H` must be symmetric positive definite.
pub fn solve_qp(qp: &QpProblem, settings: &QpSettings) -> Result<QpSolution, QpError> {
    qp.validate()?;
    let n = qp.dim();
    let h_inv = qp
        .hessian
        .clone()
        .cholesky()
        .ok_or(QpError::NotPositiveDefinite)?
        .inverse();
    let constraints = one_sided(qp);
    let normals: Vec<DVector<f64>> = constraints.iter().map(|c| c.normal(qp)).collect();
    let mut h_inv_normals: Vec<Option<DVector<f64>>> = vec![None; constraints.len()];
    let tol = |c: &Constraint| settings.feasibility_tolerance * c.bound.abs().max(1.0);

    let mut x = -(&h_inv * &qp.gradient);
    let mut active: Vec<usize> = Vec::new();
    let mut duals: Vec<f64> = Vec::new();
    let mut iterations = 0;

    loop {
        // most violated constraint, lowest index on ties
        let mut pick: Option<(usize, f64)> = None;
        for (i, c) in constraints.iter().enumerate() {
            if active.contains(&i) {
                continue;
            }
            let s = c.slack(qp, &x);
            if s < -tol(c) && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((p, _)) = pick else { break };
        let np = &normals[p];
        if h_inv_normals[p].is_none() {
            h_inv_normals[p] = Some(&h_inv * np);
        }
        let mut dual_p = 0.0;

        loop {
            iterations += 1;
            if iterations > settings.max_iterations {
                return Err(QpError::MaxIterations(settings.max_iterations));
            }
            let (z, r) = step_directions(&normals, &h_inv_normals, &active, p);
            // dual step length limited by active multipliers reaching zero
            let mut t1 = f64::INFINITY;
            let mut block = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 1e-12 {
                    let t = duals[j] / rj;
                    if t < t1 {
                        t1 = t;
                        block = Some(j);
                    }
                }
            }
            let zn = z.dot(np);
            let t2 = if z.amax() > 1e-12 && zn > 1e-14 {
                -constraints[p].slack(qp, &x) / zn
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Err(QpError::Infeasible { constraint: p });
            }
            for (j, rj) in r.iter().enumerate() {
                duals[j] -= t * rj;
            }
            dual_p += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(p);
                duals.push(dual_p);
                break;
            }
            let j = block.expect("finite partial step has a blocking constraint");
            active.remove(j);
            duals.remove(j);
        }
    }

    let mut bound_multipliers = DVector::zeros(n);
    let mut row_multipliers = DVector::zeros(qp.rows.nrows());
    for (k, &i) in active.iter().enumerate() {
        let c = &constraints[i];
        // λ in the convention ∇f = −Σ λ_i ∇(bound side); store sign so that
        // H x + g + Σ μ_i a_i = 0 with μ ≥ 0 on upper, ≤ 0 on lower
        let mu = -c.sign() * duals[k];
        match c.source {
            Source::Var(v) => bound_multipliers[v] += mu,
            Source::Row(r) => row_multipliers[r] += mu,
        }
    }
    Ok(QpSolution {
        x,
        bound_multipliers,
        row_multipliers,
        iterations,
        active: active.len(),
    })
}

/// Primal direction `z = H⁻¹(I − N N*) n_p` and dual direction `r = N* n_p`
/// with `N* = (NᵀH⁻¹N)⁻¹NᵀH⁻¹`; `hn[i]` caches `H⁻¹ n_i`.
fn step_directions(
    normals: &[DVector<f64>],
    hn: &[Option<DVector<f64>>],
    active: &[usize],
    p: usize,
) -> (DVector<f64>, DVector<f64>) {
    let hnp = hn[p].clone().expect("cached");
    if active.is_empty() {
        return (hnp, DVector::zeros(0));
    }
    let q = active.len();
    let mut schur = DMatrix::zeros(q, q);
    let mut rhs = DVector::zeros(q);
    for (a, &i) in active.iter().enumerate() {
        let hi = hn[i].as_ref().expect("cached");
        rhs[a] = normals[i].dot(&hnp);
        for (b, &j) in active.iter().enumerate().take(a + 1) {
            let v = normals[j].dot(hi);
            schur[(a, b)] = v;
            schur[(b, a)] = v;
        }
    }
    let r = match schur.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => schur.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(q)),
    };
    let mut z = hnp;
    for (a, &i) in active.iter().enumerate() {
        z.axpy(-r[a], hn[i].as_ref().expect("cached"), 1.0);
    }
    (z, r)
}

/// Residuals of the KKT conditions at a candidate solution.
pub fn kkt_report(qp: &QpProblem, sol: &QpSolution) -> KktReport {
    let x = &sol.x;
    let grad = &qp.hessian * x + &qp.gradient + &sol.bound_multipliers + qp.rows.transpose() * &sol.row_multipliers;
    let stationarity = grad.amax();
    let cx = &qp.rows * x;
    let mut feasibility: f64 = 0.0;
    let mut complementarity: f64 = 0.0;
    let mut check = |v: f64, lo: f64, hi: f64, mu: f64| {
        feasibility = feasibility.max(lo - v).max(v - hi);
        let gap = if mu > 0.0 {
            mu * (hi - v)
        } else if mu < 0.0 {
            -mu * (v - lo)
        } else {
            0.0
        };
        complementarity = complementarity.max(gap.abs());
        // a multiplier on a side that does not exist is a violation too
        if (mu > 0.0 && !hi.is_finite()) || (mu < 0.0 && !lo.is_finite()) {
            complementarity = f64::INFINITY;
        }
    };
    for i in 0..x.len() {
        check(x[i], qp.lower[i], qp.upper[i], sol.bound_multipliers[i]);
    }
    for r in 0..cx.len() {
        check(cx[r], qp.row_lower[r], qp.row_upper[r], sol.row_multipliers[r]);
    }
    KktReport {
        stationarity,
        feasibility: feasibility.max(0.0),
        complementarity,
    }
}

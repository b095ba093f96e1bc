//! Nonlinear MPC core: condensed Gauss-Newton real-time iterations over a
//! dense active-set QP.

pub mod ocp;
pub mod qp;

pub use ocp::{
    forward_difference_jacobians, linearize, CondensedQp, NmpcError, OcpModel, OcpProblem, OcpSolution, RtiSolver,
    SolverSettings,
};
pub use qp::{kkt_report, solve_qp, KktReport, QpError, QpProblem, QpSettings, QpSolution};

//! Tracking RMSE, constraint bookkeeping and solver-time statistics.

use crate::config::ControllerKind;
use crate::controllers::{AmpcConfig, ResidualMode};
use crate::sim::SimLog;
use crate::so3::{error_euler, So3Error};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Compute budget per control tick, seconds.
pub const SOLVE_BUDGET: f64 = 0.010;
/// Slack allowed on every constraint check.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-6;
/// Averaging window at the end of an episode for tilt drift, seconds.
pub const DRIFT_WINDOW: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("log contains no samples")]
    EmptyLog,
    #[error("attitude error at t = {time:.3} s: {source}")]
    Attitude { time: f64, source: So3Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RmsePair {
    pub position: f64,
    pub attitude: f64,
    pub position_axis: [f64; 3],
    pub attitude_axis: [f64; 3],
}

/// Position and attitude RMSE from per-sample error vectors. The attitude
/// errors are ZYX euler angles of the reference-to-actual rotation.
pub fn rmse_from_errors<I>(errors: I) -> Result<RmsePair, MetricsError>
where
    I: IntoIterator<Item = (Vector3<f64>, Vector3<f64>)>,
{
    let mut sp = Vector3::zeros();
    let mut sa = Vector3::zeros();
    let mut n = 0usize;
    for (ep, ea) in errors {
        sp += ep.component_mul(&ep);
        sa += ea.component_mul(&ea);
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyLog);
    }
    let n = n as f64;
    Ok(RmsePair {
        position: (sp.sum() / n).sqrt(),
        attitude: (sa.sum() / n).sqrt(),
        position_axis: (sp / n).map(f64::sqrt).into(),
        attitude_axis: (sa / n).map(f64::sqrt).into(),
    })
}

/// Limits checked against the commanded actuators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActuatorLimits {
    pub tilt_rate_max: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub thrust_rate_max: f64,
}

impl From<&AmpcConfig> for ActuatorLimits {
    fn from(c: &AmpcConfig) -> Self {
        Self {
            tilt_rate_max: c.tilt_rate_max,
            thrust_min: c.thrust_min,
            thrust_max: c.thrust_max,
            thrust_rate_max: c.thrust_rate_max,
        }
    }
}

/// Ticks on which a commanded quantity left its box by more than the tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub tolerance: f64,
    pub limits: ActuatorLimits,
    pub wrench_box_violations: usize,
    pub tilt_rate_violations: usize,
    pub thrust_bound_violations: usize,
    pub thrust_rate_violations: usize,
    pub max_wrench_excess: f64,
    pub max_tilt_rate: f64,
    pub min_thrust: f64,
    pub max_thrust: f64,
    pub max_thrust_rate: f64,
}

impl ConstraintReport {
    pub fn total(&self) -> usize {
        self.wrench_box_violations + self.tilt_rate_violations + self.thrust_bound_violations + self.thrust_rate_violations
    }
}

pub fn constraint_report(log: &SimLog, limits: &ActuatorLimits) -> ConstraintReport {
    let tol = CONSTRAINT_TOLERANCE;
    let mut r = ConstraintReport {
        tolerance: tol,
        limits: *limits,
        wrench_box_violations: 0,
        tilt_rate_violations: 0,
        thrust_bound_violations: 0,
        thrust_rate_violations: 0,
        max_wrench_excess: 0.0,
        max_tilt_rate: 0.0,
        min_thrust: f64::INFINITY,
        max_thrust: f64::NEG_INFINITY,
        max_thrust_rate: 0.0,
    };
    for row in &log.rows {
        let tilt_rate = row.tilt_rate_command.amax();
        let thrust_rate = row.thrust_rate_command.amax();
        let (lo, hi) = (row.thrust_command.min(), row.thrust_command.max());
        r.max_wrench_excess = r.max_wrench_excess.max(row.box_violation);
        r.max_tilt_rate = r.max_tilt_rate.max(tilt_rate);
        r.max_thrust_rate = r.max_thrust_rate.max(thrust_rate);
        r.min_thrust = r.min_thrust.min(lo);
        r.max_thrust = r.max_thrust.max(hi);
        r.wrench_box_violations += (row.box_violation > tol) as usize;
        r.tilt_rate_violations += (tilt_rate > limits.tilt_rate_max + tol) as usize;
        r.thrust_rate_violations += (thrust_rate > limits.thrust_rate_max + tol) as usize;
        r.thrust_bound_violations += (lo < limits.thrust_min - tol || hi > limits.thrust_max + tol) as usize;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverStats {
    pub ticks: usize,
    pub budget: f64,
    pub p50: f64,
    pub p95: f64,
    pub max: f64,
    pub mean: f64,
    /// Fraction of ticks strictly over the budget.
    pub exceedance: f64,
}

/// Linear-interpolation percentile of sorted data, `p ∈ [0, 1]`.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let (i, frac) = (pos.floor() as usize, pos.fract());
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Statistics of per-tick solve times in seconds.
pub fn solver_stats(times: &[f64], budget: f64) -> Result<SolverStats, MetricsError> {
    if times.is_empty() {
        return Err(MetricsError::EmptyLog);
    }
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = times.len() as f64;
    Ok(SolverStats {
        ticks: times.len(),
        budget,
        p50: percentile(&sorted, 0.5),
        p95: percentile(&sorted, 0.95),
        max: sorted[sorted.len() - 1],
        mean: times.iter().sum::<f64>() / n,
        exceedance: times.iter().filter(|t| **t > budget).count() as f64 / n,
    })
}

/// Deviation of the commanded tilt angles from the hover allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltReport {
    /// Largest `‖α − α*‖∞` over the episode, rad.
    pub max_deviation: f64,
    /// Largest per-arm mean of `α − α*` over the final second, rad.
    pub drift: f64,
    pub max_rate: f64,
}

pub fn tilt_report(log: &SimLog) -> Result<TiltReport, MetricsError> {
    let last = log.rows.last().ok_or(MetricsError::EmptyLog)?;
    let start = last.time - DRIFT_WINDOW;
    let mut max_deviation = 0.0f64;
    let mut max_rate = 0.0f64;
    let mut sum = vec![0.0; log.arms];
    let mut count = 0usize;
    for row in &log.rows {
        let dev = &row.tilt_command - &row.tilt_reference;
        max_deviation = max_deviation.max(dev.amax());
        max_rate = max_rate.max(row.tilt_rate_command.amax());
        if row.time > start {
            sum.iter_mut().zip(dev.iter()).for_each(|(s, d)| *s += d);
            count += 1;
        }
    }
    let drift = sum.iter().map(|s| (s / count as f64).abs()).fold(0.0, f64::max);
    Ok(TiltReport {
        max_deviation,
        drift,
        max_rate,
    })
}

/// Summary of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub name: String,
    pub controller: ControllerKind,
    pub mode: ResidualMode,
    pub trajectory: String,
    pub seed: u64,
    pub duration: f64,
    /// RMSEs are taken over plant ticks.
    pub samples: usize,
    pub rmse: RmsePair,
    pub constraints: ConstraintReport,
    pub tilt: TiltReport,
    pub solver: Option<SolverStats>,
    pub solver_failures: usize,
    pub rejected_measurements: usize,
}

/// Position and attitude RMSE over all plant ticks.
pub fn tracking_rmse(log: &SimLog) -> Result<RmsePair, MetricsError> {
    tracking_rmse_window(log, f64::NEG_INFINITY, f64::INFINITY)
}

/// As [`tracking_rmse`] restricted to `t0 <= t < t1`.
pub fn tracking_rmse_window(log: &SimLog, t0: f64, t1: f64) -> Result<RmsePair, MetricsError> {
    let errors: Result<Vec<_>, MetricsError> = log
        .rows
        .iter()
        .filter(|r| r.time >= t0 && r.time < t1)
        .map(|r| {
            let ea = error_euler(&r.state.attitude, &r.reference.attitude)
                .map_err(|source| MetricsError::Attitude { time: r.time, source })?;
            Ok((r.state.position - r.reference.position, ea))
        })
        .collect();
    rmse_from_errors(errors?)
}

pub fn tracking_report(log: &SimLog, limits: &ActuatorLimits) -> Result<TrackingReport, MetricsError> {
    Ok(TrackingReport {
        name: log.name.clone(),
        controller: log.controller,
        mode: log.mode,
        trajectory: log.trajectory.clone(),
        seed: log.seed,
        duration: log.duration(),
        samples: log.rows.len(),
        rmse: tracking_rmse(log)?,
        constraints: constraint_report(log, limits),
        tilt: tilt_report(log)?,
        solver: solver_stats(&log.solve_times, SOLVE_BUDGET).ok(),
        solver_failures: log.solver_failures,
        rejected_measurements: log.rejected_measurements,
    })
}

use crate::config::{ControllerKind, ExperimentConfig};
use crate::controllers::{ReferencePoint, ResidualMode};
use crate::dynamics::{RigidState, Wrench};
use crate::residual::TrainingLog;
use nalgebra::DVector;
use std::fmt::Write as _;
use std::io::{self, Write};
use std::path::Path;

/// One plant tick. Wrenches are body-frame.
#[derive(Debug, Clone)]
pub struct LogRow {
    pub time: f64,
    pub state: RigidState,
    /// State handed to the controller.
    pub estimate: RigidState,
    pub reference: ReferencePoint,
    /// Wrench the controller asked for (after any Post-MPC correction).
    pub command_wrench: Wrench,
    /// Wrench produced by the actuators as they are.
    pub realized_wrench: Wrench,
    pub true_disturbance: Wrench,
    pub estimated_disturbance: Wrench,
    /// Residual the controller used at its last tick.
    pub residual: Wrench,
    pub tilt_command: DVector<f64>,
    pub tilt: DVector<f64>,
    /// Hover allocation at the estimated attitude.
    pub tilt_reference: DVector<f64>,
    pub tilt_rate_command: DVector<f64>,
    pub thrust_command: DVector<f64>,
    pub thrust: DVector<f64>,
    pub thrust_rate_command: DVector<f64>,
    /// Infinity-norm excess of the commanded wrench over its box.
    pub box_violation: f64,
    pub force_box_violation: f64,
    /// Pose measurement outcome: `None` without a measurement, else accepted or not.
    pub pose_update: Option<bool>,
    /// `(qp iterations, kkt residual, solver ok)` on control ticks.
    pub control: Option<(usize, f64, bool)>,
}

/// Result of one episode.
#[derive(Debug, Clone)]
pub struct SimLog {
    pub name: String,
    pub controller: ControllerKind,
    pub mode: ResidualMode,
    pub trajectory: String,
    pub seed: u64,
    pub arms: usize,
    pub rotors: usize,
    pub plant_dt: f64,
    pub rows: Vec<LogRow>,
    /// Wall-clock seconds per control tick. Kept out of the main CSV so that
    /// the latter is reproducible bit for bit.
    pub solve_times: Vec<f64>,
    pub solver_failures: usize,
    pub rejected_measurements: usize,
    pub training: TrainingLog,
}

impl SimLog {
    pub(crate) fn new(cfg: &ExperimentConfig, trajectory: &str, arms: usize, rotors: usize, dt: f64, ticks: usize) -> Self {
        Self {
            name: cfg.name.clone(),
            controller: cfg.controller.kind,
            mode: cfg.residual.mode,
            trajectory: trajectory.to_string(),
            seed: cfg.seed,
            arms,
            rotors,
            plant_dt: dt,
            rows: Vec::with_capacity(ticks),
            solve_times: Vec::new(),
            solver_failures: 0,
            rejected_measurements: 0,
            training: TrainingLog::default(),
        }
    }

    pub(crate) fn push(&mut self, row: LogRow) {
        self.rows.push(row);
    }

    pub(crate) fn last_thrust_command(&self) -> DVector<f64> {
        self.rows
            .last()
            .map(|r| r.thrust_command.clone())
            .unwrap_or_else(|| DVector::zeros(self.rotors))
    }

    pub fn duration(&self) -> f64 {
        self.rows.len() as f64 * self.plant_dt
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for prefix in ["est", "ref"] {
            for c in ["px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "wx", "wy", "wz"] {
                h.push(format!("{prefix}_{c}"));
            }
        }
        for prefix in ["cmd", "act", "dist", "est", "res"] {
            for c in ["fx", "fy", "fz", "tx", "ty", "tz"] {
                h.push(format!("{prefix}_{c}"));
            }
        }
        for (prefix, n) in [("tilt_cmd", self.arms), ("tilt", self.arms), ("tilt_ref", self.arms), ("tilt_rate_cmd", self.arms)] {
            h.extend((0..n).map(|i| format!("{prefix}_{i}")));
        }
        for prefix in ["thrust_cmd", "thrust", "thrust_rate_cmd"] {
            h.extend((0..self.rotors).map(|i| format!("{prefix}_{i}")));
        }
        for c in ["box_violation", "force_box_violation", "pose_update", "control_tick", "qp_iterations", "kkt", "solver_ok"] {
            h.push(c.into());
        }
        h
    }

    /// Writes the log as CSV. Numbers use the shortest round-trip form.
    pub fn write_csv<W: Write>(&self, out: W) -> io::Result<()> {
        let mut out = io::BufWriter::new(out);
        writeln!(out, "{}", self.header().join(","))?;
        let mut line = String::with_capacity(2048);
        for r in &self.rows {
            line.clear();
            let _ = write!(line, "{}", r.time);
            let mut put = |v: f64| {
                let _ = write!(line, ",{v}");
            };
            for s in [&r.state, &r.estimate] {
                s.position.iter().chain(s.attitude.coords().iter()).for_each(|v| put(*v));
                s.velocity.iter().chain(s.angular_velocity.iter()).for_each(|v| put(*v));
            }
            let q = &r.reference;
            q.position.iter().chain(q.attitude.coords().iter()).for_each(|v| put(*v));
            q.velocity.iter().chain(q.angular_velocity.iter()).for_each(|v| put(*v));
            for w in [
                &r.command_wrench,
                &r.realized_wrench,
                &r.true_disturbance,
                &r.estimated_disturbance,
                &r.residual,
            ] {
                w.to_vector().iter().for_each(|v| put(*v));
            }
            for v in [
                &r.tilt_command,
                &r.tilt,
                &r.tilt_reference,
                &r.tilt_rate_command,
                &r.thrust_command,
                &r.thrust,
                &r.thrust_rate_command,
            ] {
                v.iter().for_each(|x| put(*x));
            }
            put(r.box_violation);
            put(r.force_box_violation);
            line.push_str(match r.pose_update {
                None => ",0",
                Some(true) => ",1",
                Some(false) => ",2",
            });
            match r.control {
                Some((iters, kkt, ok)) => {
                    let _ = write!(line, ",1,{iters},{kkt},{}", ok as u8);
                }
                None => line.push_str(",0,0,0,1"),
            }
            writeln!(out, "{line}")?;
        }
        out.flush()
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn save_csv(&self, path: &Path) -> io::Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Solve times in milliseconds, one per control tick.
    pub fn save_timing(&self, path: &Path) -> io::Result<()> {
        let mut out = io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "tick,solve_ms")?;
        for (i, s) in self.solve_times.iter().enumerate() {
            writeln!(out, "{i},{}", s * 1e3)?;
        }
        out.flush()
    }
}

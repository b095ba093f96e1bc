//! Batch entry points behind the command-line verbs.

use crate::config::{merge, toml_to_json, ConfigError, ExperimentConfig};
use crate::dynamics::InertialParams;
use crate::metrics::{tracking_report, ActuatorLimits, MetricsError, TrackingReport};
use crate::residual::{
    build_features, compute_residuals, design_matrix, group_error, ridge_fit, target_matrix, training_rmse,
    FeatureVector, GroupError, ResidualError, ResidualModel, TrainingLog,
};
use crate::sim::{Episode, SimError, SimLog};
use crate::so3::{error_euler, UnitQuaternion};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Input(String),
}

impl ExperimentError {
    /// 2 for configuration problems, 3 for solver or plant failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Sim(SimError::Config(_)) => 2,
            Self::Sim(SimError::Solver { .. } | SimError::Diverged { .. }) => 3,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(v).map_err(|e| ExperimentError::Input(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

/// A config plus the raw tree it was parsed from.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub raw: Value,
}

/// Reads a TOML config (or a resolved JSON) without validating it.
pub fn read_config_tree(path: &Path) -> Result<Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    if path.extension().is_some_and(|e| e == "json") {
        let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(v.get("config").cloned().unwrap_or(v))
    } else {
        toml_to_json(&text)
    }
}

pub fn config_from_tree(raw: &Value) -> Result<ExperimentConfig, ConfigError> {
    let cfg: ExperimentConfig = serde_json::from_value(raw.clone()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let raw = read_config_tree(path)?;
    Ok(LoadedConfig {
        config: config_from_tree(&raw)?,
        raw,
    })
}

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: TrackingReport,
    pub log_path: PathBuf,
    pub report_path: PathBuf,
    pub resolved_path: PathBuf,
    pub timing_path: PathBuf,
    pub imu_path: Option<PathBuf>,
}

pub fn actuator_limits(cfg: &ExperimentConfig) -> ActuatorLimits {
    ActuatorLimits::from(&cfg.controller.ampc)
}

/// Runs one episode and returns the log with its report.
pub fn simulate(cfg: &ExperimentConfig) -> Result<(SimLog, TrackingReport), ExperimentError> {
    let log = Episode::new(cfg.clone())?.run()?;
    let report = tracking_report(&log, &actuator_limits(cfg))?;
    Ok((log, report))
}

/// Runs one episode and writes `<name>.csv`, `<name>.timing.csv`,
/// `<name>.report.json`, `<name>.resolved.json` and optionally `<name>.imu.csv`.
pub fn run(cfg: &ExperimentConfig, raw: Option<&Value>, out_dir: &Path) -> Result<RunOutput, ExperimentError> {
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let (log, report) = simulate(cfg)?;
    let base = out_dir.join(&cfg.name);
    let with = |suffix: &str| PathBuf::from(format!("{}{suffix}", base.display()));
    let log_path = with(".csv");
    let timing_path = with(".timing.csv");
    let report_path = with(".report.json");
    let resolved_path = with(".resolved.json");
    log.save_csv(&log_path).map_err(io_err(&log_path))?;
    log.save_timing(&timing_path).map_err(io_err(&timing_path))?;
    write_json(&report_path, &report)?;
    write_json(&resolved_path, &cfg.resolved(raw))?;
    let imu_path = if cfg.output.log_imu {
        let p = with(".imu.csv");
        log.training.write_csv(&p)?;
        Some(p)
    } else {
        None
    };
    Ok(RunOutput {
        report,
        log_path,
        report_path,
        resolved_path,
        timing_path,
        imu_path,
    })
}

pub fn summary_line(r: &TrackingReport) -> String {
    format!(
        "{} {:?} {} {}: position RMSE {:.4} m, attitude RMSE {:.4} rad, constraint violations {}",
        r.name,
        r.controller,
        r.mode.label(),
        r.trajectory,
        r.rmse.position,
        r.rmse.attitude,
        r.constraints.total()
    )
    .replace("Wmpc", "WMPC")
    .replace("Ampc", "AMPC")
}

/// A set of configurations run over a set of trajectories.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default = "default_matrix_name")]
    pub name: String,
    /// Base experiment config, in the same layout as a single-run file.
    pub base: Value,
    /// Trajectory presets by kind name, or full trajectory tables.
    pub trajectories: Vec<Value>,
    pub variants: Vec<Variant>,
}

fn default_matrix_name() -> String {
    "matrix".into()
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub label: String,
    #[serde(default)]
    pub overrides: Value,
}

impl MatrixConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let tree = read_config_tree(path)?;
        serde_json::from_value(tree).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// One raw config tree per (trajectory, variant), trajectory-major.
    pub fn episodes(&self) -> Result<Vec<MatrixCell>, ConfigError> {
        let mut errs = Vec::new();
        let mut cells = Vec::new();
        for (ti, traj) in self.trajectories.iter().enumerate() {
            let traj = match traj {
                Value::String(kind) => serde_json::json!({ "kind": kind }),
                other => other.clone(),
            };
            let traj_name = traj.get("kind").and_then(Value::as_str).unwrap_or("trajectory").to_string();
            for (vi, v) in self.variants.iter().enumerate() {
                let mut raw = self.base.clone();
                if !v.overrides.is_null() {
                    merge(&mut raw, &v.overrides);
                }
                merge(&mut raw, &serde_json::json!({ "trajectory": traj }));
                let name = format!("{}_{}_{}", self.name, traj_name, sanitize(&v.label));
                merge(&mut raw, &serde_json::json!({ "name": name }));
                match config_from_tree(&raw) {
                    Ok(config) => cells.push(MatrixCell {
                        trajectory: ti,
                        variant: vi,
                        trajectory_name: traj_name.clone(),
                        config,
                        raw,
                    }),
                    Err(e) => errs.push(format!("{} / {}: {e}", traj_name, v.label)),
                }
            }
        }
        if errs.is_empty() {
            Ok(cells)
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c.to_ascii_lowercase() } else { '-' })
        .collect()
}

#[derive(Debug, Clone)]
pub struct MatrixCell {
    pub trajectory: usize,
    pub variant: usize,
    pub trajectory_name: String,
    pub config: ExperimentConfig,
    pub raw: Value,
}

#[derive(Debug)]
pub struct MatrixOutput {
    pub table_path: PathBuf,
    pub reports: Vec<Result<TrackingReport, String>>,
    pub table: String,
}

/// Runs every cell on up to `jobs` threads. Failed cells are marked in the
/// table and do not stop the others.
pub fn matrix(m: &MatrixConfig, out_dir: &Path, jobs: usize, seed: Option<u64>) -> Result<MatrixOutput, ExperimentError> {
    let mut cells = m.episodes()?;
    if let Some(s) = seed {
        for c in &mut cells {
            c.config.seed = s;
        }
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| ExperimentError::Input(e.to_string()))?;
    let reports: Vec<Result<TrackingReport, String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|c| {
                run(&c.config, Some(&c.raw), out_dir)
                    .map(|o| o.report)
                    .map_err(|e| e.to_string())
            })
            .collect()
    });
    let table = comparison_table(m, &cells, &reports);
    let table_path = out_dir.join(format!("{}.csv", m.name));
    std::fs::write(&table_path, &table).map_err(io_err(&table_path))?;
    Ok(MatrixOutput {
        table_path,
        reports,
        table,
    })
}

/// Rows `metric,trajectory,<variant labels>`, one block per metric.
pub fn comparison_table(m: &MatrixConfig, cells: &[MatrixCell], reports: &[Result<TrackingReport, String>]) -> String {
    let lookup: HashMap<(usize, usize), &Result<TrackingReport, String>> =
        cells.iter().zip(reports).map(|(c, r)| ((c.trajectory, c.variant), r)).collect();
    let names: Vec<String> = (0..m.trajectories.len())
        .map(|ti| {
            cells
                .iter()
                .find(|c| c.trajectory == ti)
                .map(|c| c.trajectory_name.clone())
                .unwrap_or_default()
        })
        .collect();
    let mut out = String::from("metric,trajectory");
    for v in &m.variants {
        out.push(',');
        out.push_str(&csv_field(&v.label));
    }
    out.push('\n');
    let metrics: [(&str, fn(&TrackingReport) -> f64); 2] = [
        ("position_rmse_m", |r| r.rmse.position),
        ("attitude_rmse_rad", |r| r.rmse.attitude),
    ];
    for (metric, get) in metrics {
        for (ti, name) in names.iter().enumerate() {
            out.push_str(&format!("{metric},{name}"));
            for vi in 0..m.variants.len() {
                match lookup.get(&(ti, vi)) {
                    Some(Ok(r)) => out.push_str(&format!(",{}", get(r))),
                    _ => out.push_str(",FAILED"),
                }
            }
            out.push('\n');
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Raw-versus-model error summary of a residual fit.
#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub samples: usize,
    pub lambda: f64,
    pub raw: GroupError,
    pub model: GroupError,
}

impl TrainReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<8}{:>16}{:>16}{:>18}{:>18}\n",
            "", "force RMSE [N]", "force std [N]", "torque RMSE [Nm]", "torque std [Nm]"
        );
        for (name, g) in [("Raw", &self.raw), ("Model", &self.model)] {
            s += &format!(
                "{:<8}{:>16.4}{:>16.4}{:>18.4}{:>18.4}\n",
                name, g.force_rmse, g.force_std, g.torque_rmse, g.torque_std
            );
        }
        s
    }
}

/// Stacks several logs (each differentiated on its own) and fits one model.
pub fn train(logs: &[TrainingLog], params: &InertialParams, lambda: f64) -> Result<(ResidualModel, TrainReport), ExperimentError> {
    let mut features: Vec<FeatureVector> = Vec::new();
    let mut residuals = Vec::new();
    for log in logs {
        residuals.extend(compute_residuals(log, params)?);
        features.extend(log.samples.iter().map(|s| build_features(&s.wrench, &s.attitude)));
    }
    if features.is_empty() {
        return Err(ExperimentError::Residual(ResidualError::NotEnoughSamples {
            needed: crate::residual::N_COLUMNS + 1,
            got: 0,
        }));
    }
    let x = design_matrix(&features);
    let y = target_matrix(&residuals);
    let model = ridge_fit(&x, &y, lambda)?;
    let report = TrainReport {
        samples: x.nrows(),
        lambda,
        raw: group_error(&y),
        model: training_rmse(&model, &x, &y),
    };
    Ok((model, report))
}

/// Reads IMU logs, fits, and writes the model JSON.
pub fn train_files(logs: &[PathBuf], params: &InertialParams, lambda: f64, out: &Path) -> Result<TrainReport, ExperimentError> {
    let logs = logs
        .iter()
        .map(|p| TrainingLog::read_csv(p))
        .collect::<Result<Vec<_>, _>>()?;
    let (model, report) = train(&logs, params, lambda)?;
    model.save(out)?;
    Ok(report)
}

/// Converts a run CSV into long format `time,channel,value`. If a timing file
/// sits next to the log, the latest solve time is held across plant ticks.
pub fn plotdata(log_path: &Path, out: &Path) -> Result<usize, ExperimentError> {
    let mut reader = csv::Reader::from_path(log_path).map_err(|e| ExperimentError::Input(format!("{}: {e}", log_path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ExperimentError::Input(e.to_string()))?
        .iter()
        .map(String::from)
        .collect();
    let col = |name: &str| header.iter().position(|h| h == name);
    let need = |name: &str| col(name).ok_or_else(|| ExperimentError::Input(format!("log has no column {name}")));
    let t = need("t")?;
    let pos: Vec<usize> = ["px", "py", "pz"].iter().map(|c| need(c)).collect::<Result<_, _>>()?;
    let pos_ref: Vec<usize> = ["ref_px", "ref_py", "ref_pz"].iter().map(|c| need(c)).collect::<Result<_, _>>()?;
    let quat: Vec<usize> = ["qw", "qx", "qy", "qz"].iter().map(|c| need(c)).collect::<Result<_, _>>()?;
    let quat_ref: Vec<usize> = ["ref_qw", "ref_qx", "ref_qy", "ref_qz"]
        .iter()
        .map(|c| need(c))
        .collect::<Result<_, _>>()?;
    let control = need("control_tick")?;
    let mut passthrough: Vec<(String, usize)> = Vec::new();
    for prefix in ["tilt_cmd_", "tilt_rate_cmd_"] {
        for (i, h) in header.iter().enumerate() {
            if h.strip_prefix(prefix).is_some_and(|rest| rest.parse::<usize>().is_ok()) {
                passthrough.push((h.clone(), i));
            }
        }
    }
    let timing_path = PathBuf::from(log_path.to_string_lossy().replace(".csv", ".timing.csv"));
    let solve_ms: Option<Vec<f64>> = if timing_path != log_path && timing_path.exists() {
        let mut r = csv::Reader::from_path(&timing_path).map_err(|e| ExperimentError::Input(e.to_string()))?;
        let mut v = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| ExperimentError::Input(e.to_string()))?;
            v.push(rec[1].parse::<f64>().map_err(|e| ExperimentError::Input(e.to_string()))?);
        }
        Some(v)
    } else {
        None
    };

    let file = std::fs::File::create(out).map_err(io_err(out))?;
    let mut w = std::io::BufWriter::new(file);
    use std::io::Write;
    let werr = io_err(out);
    let mut rows = 0usize;
    let mut tick: Option<usize> = None;
    let mut buf = String::from("time,channel,value\n");
    for rec in reader.records() {
        let rec = rec.map_err(|e| ExperimentError::Input(e.to_string()))?;
        let num = |i: usize| -> Result<f64, ExperimentError> {
            rec[i].parse::<f64>().map_err(|e| ExperimentError::Input(format!("column {}: {e}", header[i])))
        };
        let time = num(t)?;
        let p = Vector3::new(num(pos[0])? - num(pos_ref[0])?, num(pos[1])? - num(pos_ref[1])?, num(pos[2])? - num(pos_ref[2])?);
        let q = UnitQuaternion::from_slice(&[num(quat[0])?, num(quat[1])?, num(quat[2])?, num(quat[3])?]);
        let qr = UnitQuaternion::from_slice(&[num(quat_ref[0])?, num(quat_ref[1])?, num(quat_ref[2])?, num(quat_ref[3])?]);
        let e = error_euler(&q, &qr).map_err(|e| ExperimentError::Input(format!("t = {time}: {e}")))?;
        let mut emit = |channel: &str, v: f64| {
            buf.push_str(&format!("{time},{channel},{v}\n"));
            rows += 1;
        };
        for (name, v) in ["ex", "ey", "ez"].iter().zip(p.iter()) {
            emit(name, *v);
        }
        for (name, v) in ["eroll", "epitch", "eyaw"].iter().zip(e.iter()) {
            emit(name, *v);
        }
        for (name, i) in &passthrough {
            emit(name, num(*i)?);
        }
        if let Some(times) = &solve_ms {
            if num(control)? > 0.5 {
                tick = Some(tick.map_or(0, |k| k + 1));
            }
            emit("solve_ms", tick.and_then(|k| times.get(k)).copied().unwrap_or(f64::NAN));
        }
        if buf.len() > 1 << 16 {
            w.write_all(buf.as_bytes()).map_err(io_err(out))?;
            buf.clear();
        }
    }
    w.write_all(buf.as_bytes()).map_err(werr)?;
    w.flush().map_err(io_err(out))?;
    Ok(rows)
}

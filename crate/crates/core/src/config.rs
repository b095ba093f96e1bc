//! Experiment configuration: TOML in, resolved JSON out.
//!
//! Unknown keys are rejected everywhere. The resolved form carries a source
//! tag per leaf so published constants can be told apart from defaults chosen
//! for this implementation.

use crate::allocation::{AllocationMatrix, PlatformGeometry};
use crate::controllers::{AmpcConfig, ResidualMode, WmpcConfig};
use crate::dynamics::InertialParams;
use crate::ekf::EkfNoise;
use crate::nmpc::{QpSettings, SolverSettings};
use crate::residual::DEFAULT_LAMBDA;
use crate::sim::{ActuatorPlantModel, DisturbanceConfig, SensorConfig};
use crate::trajectories::{TrajectoryKind, TrajectorySpec};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub arms: usize,
    pub rotors_per_arm: usize,
    /// m
    pub arm_radius: f64,
    /// m
    pub drag_coefficient: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self {
            arms: 6,
            rotors_per_arm: 2,
            arm_radius: 0.3,
            drag_coefficient: 0.016,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    /// kg
    pub mass: f64,
    /// Principal moments, kg·m².
    #[serde(default = "default_inertia")]
    pub inertia: [f64; 3],
    /// m/s², pointing down.
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    #[serde(default)]
    pub geometry: GeometryConfig,
}

fn default_inertia() -> [f64; 3] {
    [0.08, 0.08, 0.14]
}

fn default_gravity() -> f64 {
    crate::dynamics::STANDARD_GRAVITY
}

impl PlatformConfig {
    pub fn inertial(&self) -> Result<InertialParams, String> {
        InertialParams::new(
            self.mass,
            Matrix3::from_diagonal(&Vector3::from(self.inertia)),
            Vector3::new(0.0, 0.0, -self.gravity),
        )
        .map_err(|e| e.to_string())
    }

    pub fn allocation(&self) -> Result<AllocationMatrix, String> {
        let g = &self.geometry;
        AllocationMatrix::new(PlatformGeometry::regular(
            g.arms,
            g.rotors_per_arm,
            g.arm_radius,
            g.drag_coefficient,
        ))
        .map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    #[default]
    Wmpc,
    Ampc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    pub wmpc: WmpcConfig,
    pub ampc: AmpcConfig,
    pub qp_max_iterations: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Wmpc,
            wmpc: WmpcConfig::default(),
            ampc: AmpcConfig::default(),
            qp_max_iterations: 2000,
        }
    }
}

impl ControllerConfig {
    pub fn solver_settings(&self) -> SolverSettings {
        SolverSettings {
            qp: QpSettings {
                max_iterations: self.qp_max_iterations,
                ..QpSettings::default()
            },
            ..SolverSettings::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidualConfig {
    pub mode: ResidualMode,
    pub lambda: f64,
    /// Trained model JSON, needed by the In-MPC and Post-MPC modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<PathBuf>,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            mode: ResidualMode::None,
            lambda: DEFAULT_LAMBDA,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub plant_rate: f64,
    pub control_rate: f64,
    /// Overrides the trajectory duration when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration: Option<f64>,
    pub actuators: ActuatorPlantModel,
    pub sensors: SensorConfig,
    /// Feed the controller the true state instead of the observer estimate.
    pub perfect_state: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            plant_rate: 1000.0,
            control_rate: 100.0,
            duration: None,
            actuators: ActuatorPlantModel::default(),
            sensors: SensorConfig::default(),
            perfect_state: false,
        }
    }
}

impl SimConfig {
    /// Plant ticks per control tick, sensor period in ticks.
    pub fn ticks(&self, rate: f64) -> usize {
        (self.plant_rate / rate).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Also write the IMU training log.
    pub log_imu: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            log_imu: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub platform: PlatformConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub residual: ResidualConfig,
    #[serde(default)]
    pub estimator: EkfNoise,
    #[serde(default)]
    pub disturbance: DisturbanceConfig,
    #[serde(default = "default_trajectory")]
    pub trajectory: TrajectorySpec,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_name() -> String {
    "episode".into()
}

fn default_trajectory() -> TrajectorySpec {
    TrajectorySpec::preset(TrajectoryKind::Hover)
}

/// Leaves whose default values are published constants.
const PUBLISHED_FIELDS: &[&str] = &[
    "platform.mass",
    "controller.wmpc.horizon",
    "controller.wmpc.dt",
    "controller.wmpc.force_max",
    "controller.wmpc.torque_max",
    "controller.ampc.horizon",
    "controller.ampc.dt",
    "controller.ampc.force_max",
    "controller.ampc.torque_max",
    "controller.ampc.tilt_rate_max",
    "controller.ampc.thrust_min",
    "controller.ampc.thrust_max",
    "controller.ampc.thrust_rate_max",
    "controller.ampc.thrust_weight",
    "controller.ampc.tilt_weight",
    "controller.ampc.tilt_rate_weight",
    "residual.lambda",
    "trajectory.kind",
];

impl ExperimentConfig {
    /// Default experiment for the given mass.
    pub fn with_mass(mass: f64) -> Self {
        Self {
            name: default_name(),
            seed: 0,
            platform: PlatformConfig {
                mass,
                inertia: default_inertia(),
                gravity: default_gravity(),
                geometry: GeometryConfig::default(),
            },
            controller: ControllerConfig::default(),
            residual: ResidualConfig::default(),
            estimator: EkfNoise::default(),
            disturbance: DisturbanceConfig::default(),
            trajectory: default_trajectory(),
            sim: SimConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// The default platform with the published mass.
    pub fn reference_platform() -> Self {
        Self::with_mass(4.36)
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Accepts TOML, or the resolved JSON written next to every run.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let v: Value = serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?;
            let inner = v.get("config").cloned().unwrap_or(v);
            let cfg: Self = serde_json::from_value(inner).map_err(|e| ConfigError::Parse(e.to_string()))?;
            cfg.validate()?;
            return Ok(cfg);
        }
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut check = |field: &str, r: Result<(), String>| {
            if let Err(e) = r {
                errs.push(format!("{field}: {e}"));
            }
        };
        check("platform", self.platform.inertial().map(|_| ()));
        check("platform.geometry", self.platform.allocation().map(|_| ()));
        check("controller.wmpc", self.controller.wmpc.validate());
        check("controller.ampc", self.controller.ampc.validate());
        check(
            "controller.qp_max_iterations",
            if self.controller.qp_max_iterations > 0 {
                Ok(())
            } else {
                Err("must be positive".into())
            },
        );
        check(
            "residual.lambda",
            if self.residual.lambda.is_finite() && self.residual.lambda >= 0.0 {
                Ok(())
            } else {
                Err("must be finite and non-negative".into())
            },
        );
        let needs_model = matches!(self.residual.mode, ResidualMode::InMpc | ResidualMode::PostMpc);
        check(
            "residual.model",
            if needs_model && self.residual.model.is_none() {
                Err("the in-mpc and post-mpc modes need a trained model".into())
            } else {
                Ok(())
            },
        );
        check(
            "residual.mode",
            if self.controller.kind == ControllerKind::Ampc && needs_model {
                Err("the actuator-level controller accepts only observer residuals".into())
            } else {
                Ok(())
            },
        );
        check("estimator", self.estimator.validate());
        check("disturbance", self.disturbance.validate());
        check("trajectory", self.trajectory.build().map(|_| ()).map_err(|e| e.to_string()));
        let sim = &self.sim;
        check(
            "sim",
            if !(sim.plant_rate > 0.0 && sim.control_rate > 0.0) {
                Err("rates must be positive".into())
            } else if (sim.plant_rate / sim.control_rate).fract().abs() > 1e-9
                || (sim.plant_rate / sim.sensors.pose_rate).fract().abs() > 1e-9
                || (sim.plant_rate / sim.sensors.imu_rate).fract().abs() > 1e-9
            {
                Err("control and sensor rates must divide the plant rate".into())
            } else if sim.duration.is_some_and(|d| !(d > 0.0)) {
                Err("duration must be positive".into())
            } else {
                Ok(())
            },
        );
        check("sim.actuators", sim.actuators.validate());
        check("sim.sensors", sim.sensors.validate(sim.control_rate));
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errs))
        }
    }

    /// `{"config": ..., "sources": {"a.b": "published" | "user" | "default"}}`.
    /// `raw` is the parsed input, used to tell user-set leaves apart.
    pub fn resolved(&self, raw: Option<&Value>) -> Value {
        let config = serde_json::to_value(self).expect("config serializes");
        let mut sources = Map::new();
        collect_sources(&config, "", raw, &mut sources);
        let mut out = Map::new();
        out.insert("config".into(), config);
        out.insert("sources".into(), Value::Object(sources));
        Value::Object(out)
    }
}

fn lookup<'a>(v: &'a Value, path: &str) -> Option<&'a Value> {
    path.split('.').try_fold(v, |node, key| node.get(key))
}

fn collect_sources(v: &Value, prefix: &str, raw: Option<&Value>, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, child) in m {
                let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                collect_sources(child, &path, raw, out);
            }
        }
        _ => {
            let tag = if raw.is_some_and(|r| lookup(r, prefix).is_some()) {
                if PUBLISHED_FIELDS.contains(&prefix) {
                    "user (published default)"
                } else {
                    "user"
                }
            } else if PUBLISHED_FIELDS.contains(&prefix) {
                "published"
            } else {
                "default"
            };
            out.insert(prefix.to_string(), Value::String(tag.into()));
        }
    }
}

/// Parses TOML into a JSON tree for provenance lookups and overrides.
pub fn toml_to_json(s: &str) -> Result<Value, ConfigError> {
    let t: toml::Table = toml::from_str(s).map_err(|e| ConfigError::Parse(e.to_string()))?;
    serde_json::to_value(t).map_err(|e| ConfigError::Parse(e.to_string()))
}

/// Recursively overlays `patch` onto `base`.
pub fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, p) => *slot = p.clone(),
    }
}

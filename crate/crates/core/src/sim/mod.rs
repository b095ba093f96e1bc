//! Closed-loop simulation: plant, actuators, true disturbance, sensors,
//! observer and one of the two controllers, stepped at the plant rate.

pub mod actuators;
pub mod disturbance;
mod log;
pub mod sensors;

pub use actuators::ActuatorPlantModel;
pub use disturbance::{default_true_coefficients, DisturbanceConfig, DisturbanceKind, TrueDisturbance};
pub use log::{LogRow, SimLog};
pub use sensors::{Imu, ImuSample, PoseSensor, SensorConfig};

use crate::allocation::{ActuatorCommand, AllocationMatrix};
use crate::config::{ConfigError, ControllerKind, ExperimentConfig};
use crate::controllers::{post_mpc_correct, Ampc, ReferencePoint, ResidualMode, Wmpc, WrenchBox};
use crate::dynamics::{rk4_step, InertialParams, RigidState, Wrench};
use crate::ekf::DisturbanceObserver;
use crate::residual::{build_features, ResidualError, ResidualModel, TrainingLog, TrainingSample};
use crate::trajectories::ReferenceTrajectory;
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;
use thiserror::Error;

/// Consecutive solver failures after which the episode is abandoned.
pub const MAX_CONSECUTIVE_FAILURES: usize = 50;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("residual model: {0}")]
    Model(#[from] ResidualError),
    #[error("solver failed on {count} consecutive control ticks, last at t = {time:.3} s: {message}")]
    Solver { time: f64, count: usize, message: String },
    #[error("plant state diverged at t = {time:.3} s")]
    Diverged { time: f64 },
}

/// Named generator streams; each source of randomness gets its own.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Disturbance = 1,
    Pose = 2,
    Imu = 3,
}

fn rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream as u64);
    r
}

enum Controller {
    Wmpc {
        mpc: Box<Wmpc>,
        wrench: Wrench,
        rate: Wrench,
    },
    Ampc {
        mpc: Box<Ampc>,
        command: ActuatorCommand,
        tilt_rate: DVector<f64>,
        thrust_rate: DVector<f64>,
    },
}

/// Everything an episode needs besides the config file itself.
pub struct Episode {
    pub cfg: ExperimentConfig,
    pub params: InertialParams,
    pub alloc: AllocationMatrix,
    pub trajectory: ReferenceTrajectory,
    pub model: Option<ResidualModel>,
}

impl Episode {
    /// Validates the config and loads the residual model if the mode needs one.
    pub fn new(cfg: ExperimentConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let model = match (&cfg.residual.mode, &cfg.residual.model) {
            (ResidualMode::InMpc | ResidualMode::PostMpc, Some(path)) => Some(ResidualModel::load(path)?),
            _ => None,
        };
        Self::with_model(cfg, model)
    }

    /// As [`Episode::new`] with an in-memory residual model.
    pub fn with_model(cfg: ExperimentConfig, model: Option<ResidualModel>) -> Result<Self, SimError> {
        let invalid = |field: &str, e: String| SimError::Config(ConfigError::Invalid(vec![format!("{field}: {e}")]));
        let params = cfg.platform.inertial().map_err(|e| invalid("platform", e))?;
        let alloc = cfg.platform.allocation().map_err(|e| invalid("platform.geometry", e))?;
        let trajectory = cfg.trajectory.build().map_err(|e| invalid("trajectory", e.to_string()))?;
        if matches!(cfg.residual.mode, ResidualMode::InMpc | ResidualMode::PostMpc) && model.is_none() {
            return Err(invalid("residual.model", "no residual model available".into()));
        }
        Ok(Self {
            cfg,
            params,
            alloc,
            trajectory,
            model,
        })
    }

    pub fn duration(&self) -> f64 {
        self.cfg.sim.duration.unwrap_or(self.trajectory.duration)
    }

    pub fn run(&self) -> Result<SimLog, SimError> {
        run_episode(self)
    }
}

/// Convenience wrapper: validate, load and run.
pub fn run_config(cfg: &ExperimentConfig) -> Result<SimLog, SimError> {
    Episode::new(cfg.clone())?.run()
}

pub fn run_episode(ep: &Episode) -> Result<SimLog, SimError> {
    let cfg = &ep.cfg;
    let sim = &cfg.sim;
    let params = &ep.params;
    let alloc = &ep.alloc;
    let (na, nr) = (alloc.arms(), alloc.rotors());
    let dt = 1.0 / sim.plant_rate;
    let n_ticks = (ep.duration() * sim.plant_rate).round() as usize;
    let ctrl_every = sim.ticks(sim.control_rate);
    let pose_every = sim.ticks(sim.sensors.pose_rate);
    let imu_every = sim.ticks(sim.sensors.imu_rate);
    let control_period = ctrl_every as f64 * dt;
    let mode = cfg.residual.mode;

    let start = ep.trajectory.sample(0.0);
    let mut truth = RigidState {
        position: start.position,
        attitude: start.attitude,
        velocity: start.attitude.inverse().rotate(&start.velocity),
        angular_velocity: start.angular_velocity,
    };
    let hover_cmd = alloc.hover_allocation(&truth.attitude, params);
    let mut actuators = hover_cmd.clone();
    let settings = cfg.controller.solver_settings();

    let mut controller = match cfg.controller.kind {
        ControllerKind::Wmpc => Controller::Wmpc {
            mpc: Box::new(
                Wmpc::new(cfg.controller.wmpc.clone(), params.clone(), settings, control_period)
                    .map_err(|e| ConfigError::Invalid(vec![format!("controller.wmpc: {e}")]))?,
            ),
            wrench: alloc.forward_wrench(&hover_cmd),
            rate: Wrench::zero(),
        },
        ControllerKind::Ampc => Controller::Ampc {
            mpc: Box::new(
                Ampc::new(cfg.controller.ampc.clone(), params.clone(), alloc.clone(), settings, control_period)
                    .map_err(|e| ConfigError::Invalid(vec![format!("controller.ampc: {e}")]))?,
            ),
            command: hover_cmd.clone(),
            tilt_rate: DVector::zeros(na),
            thrust_rate: DVector::zeros(nr),
        },
    };
    let horizon_dt = match &controller {
        Controller::Wmpc { mpc, .. } => (mpc.config().horizon, mpc.config().dt),
        Controller::Ampc { mpc, .. } => (mpc.config().horizon, mpc.config().dt),
    };

    let truth_dist = TrueDisturbance::new(&cfg.disturbance)
        .map_err(|e| ConfigError::Invalid(vec![format!("disturbance: {e}")]))?;
    let mut observer = DisturbanceObserver::new(truth, cfg.estimator.clone(), params.clone());
    let mut pose = PoseSensor::new(&sim.sensors, dt);
    let imu = Imu::new(&sim.sensors);
    let mut rng_dist = rng(cfg.seed, Stream::Disturbance);
    let mut rng_pose = rng(cfg.seed, Stream::Pose);
    let mut rng_imu = rng(cfg.seed, Stream::Imu);

    let mut log = SimLog::new(cfg, &ep.trajectory.name, na, nr, dt, n_ticks);
    let mut training = TrainingLog::default();
    let mut residual = Wrench::zero();
    let mut bounds = WrenchBox {
        center: crate::controllers::hover_wrench(&start.attitude, params),
        half_width: Wrench::zero(),
    };
    let mut tilt_ref = hover_cmd.tilt.clone();
    let mut prev_tilt_cmd = hover_cmd.tilt.clone();
    let mut failures = 0usize;

    for k in 0..n_ticks {
        let t = k as f64 * dt;
        pose.record(t, &truth);
        let mut pose_update = None;
        if k % pose_every == 0 {
            if let Some(z) = pose.measure(&mut rng_pose) {
                pose_update = Some(observer.update(&z));
            }
        }
        let estimate = if sim.perfect_state { truth } else { observer.state.rigid };

        let mut tick = None;
        if k % ctrl_every == 0 {
            let (horizon, mpc_dt) = horizon_dt;
            let refs: Vec<ReferencePoint> = (0..=horizon).map(|j| ep.trajectory.sample(t + j as f64 * mpc_dt)).collect();
            let began = Instant::now();
            let outcome = match &mut controller {
                Controller::Wmpc { mpc, wrench, rate } => {
                    residual = match mode {
                        ResidualMode::None => Wrench::zero(),
                        ResidualMode::InMpc | ResidualMode::PostMpc => ep
                            .model
                            .as_ref()
                            .expect("checked at construction")
                            .predict(build_features(wrench, &estimate.attitude).as_slice())?,
                        ResidualMode::Observer => observer.estimate(),
                    };
                    let in_model = match mode {
                        ResidualMode::InMpc | ResidualMode::Observer => residual,
                        _ => Wrench::zero(),
                    };
                    match mpc.step(&estimate, wrench, &refs, &in_model) {
                        Ok(s) => {
                            *rate = s.wrench_rate;
                            bounds = s.bounds;
                            Ok((s.qp_iterations, s.kkt_residual))
                        }
                        Err(e) => {
                            *rate = Wrench::zero();
                            bounds = mpc.wrench_box(&refs[0].attitude);
                            Err(e)
                        }
                    }
                }
                Controller::Ampc {
                    mpc,
                    command,
                    tilt_rate,
                    thrust_rate,
                } => {
                    residual = match mode {
                        ResidualMode::Observer => observer.estimate(),
                        _ => Wrench::zero(),
                    };
                    match mpc.step(&estimate, command, &refs, &residual) {
                        Ok(s) => {
                            *tilt_rate = s.tilt_rate.clone();
                            *thrust_rate = s.thrust_rate.clone();
                            bounds = s.bounds;
                            tilt_ref = s.reference_command.tilt.clone();
                            Ok((s.qp_iterations, s.kkt_residual))
                        }
                        Err(e) => {
                            tilt_rate.fill(0.0);
                            thrust_rate.fill(0.0);
                            bounds = mpc.wrench_box(&refs[0].attitude);
                            Err(e)
                        }
                    }
                }
            };
            log.solve_times.push(began.elapsed().as_secs_f64());
            match outcome {
                Ok(stats) => {
                    failures = 0;
                    tick = Some((stats.0, stats.1, true));
                }
                Err(e) => {
                    failures += 1;
                    log.solver_failures += 1;
                    ::log::warn!("solver failure at t = {t:.3} s: {e}");
                    if failures >= MAX_CONSECUTIVE_FAILURES {
                        return Err(SimError::Solver {
                            time: t,
                            count: failures,
                            message: e.to_string(),
                        });
                    }
                    tick = Some((0, f64::NAN, false));
                }
            }
            if let Controller::Wmpc { .. } = controller {
                let mut star = alloc.hover_allocation(&estimate.attitude, params);
                star.unwrap_towards(&prev_tilt_cmd);
                tilt_ref = star.tilt;
            }
        }

        // actuator setpoints for this tick
        let (command_wrench, command, tilt_rate_cmd, thrust_rate_cmd) = match &controller {
            Controller::Wmpc { wrench, .. } => {
                let applied = if mode == ResidualMode::PostMpc {
                    post_mpc_correct(wrench, &residual, &bounds).0
                } else {
                    *wrench
                };
                let (mut cmd, _) = alloc.allocate(&applied, None).expect("dimensions fixed by the geometry");
                cmd.unwrap_towards(&prev_tilt_cmd);
                let tilt_rate = if k == 0 {
                    DVector::zeros(na)
                } else {
                    (&cmd.tilt - &prev_tilt_cmd) / dt
                };
                let thrust_rate = if k == 0 {
                    DVector::zeros(nr)
                } else {
                    (&cmd.thrust - log.last_thrust_command()) / dt
                };
                (applied, cmd, tilt_rate, thrust_rate)
            }
            Controller::Ampc {
                command,
                tilt_rate,
                thrust_rate,
                ..
            } => (alloc.forward_wrench(command), command.clone(), tilt_rate.clone(), thrust_rate.clone()),
        };
        prev_tilt_cmd = command.tilt.clone();

        let realized = alloc.forward_wrench(&actuators);
        let disturbance = truth_dist.evaluate(&realized, &truth.attitude, &mut rng_dist);
        log.push(LogRow {
            time: t,
            state: truth,
            estimate,
            reference: ep.trajectory.sample(t),
            command_wrench,
            realized_wrench: realized,
            true_disturbance: disturbance,
            estimated_disturbance: observer.estimate(),
            residual,
            tilt_command: command.tilt.clone(),
            tilt: actuators.tilt.clone(),
            tilt_reference: tilt_ref.clone(),
            tilt_rate_command: tilt_rate_cmd,
            thrust_command: command.thrust.clone(),
            thrust: actuators.thrust.clone(),
            thrust_rate_command: thrust_rate_cmd,
            box_violation: bounds.violation(&command_wrench),
            force_box_violation: force_violation(&bounds, &command_wrench),
            pose_update,
            control: tick,
        });
        if k % imu_every == 0 {
            let specific_force = (realized.force + disturbance.force) / params.mass;
            let s = imu.measure(&specific_force, &truth.angular_velocity, &mut rng_imu);
            training.samples.push(TrainingSample {
                time: t,
                wrench: realized,
                attitude: truth.attitude,
                accel: s.accel - imu.bias(),
                gyro: s.gyro,
            });
        }

        sim.actuators.step(&mut actuators, &command, dt);
        truth = rk4_step(&truth, &realized, &disturbance, params, dt);
        observer.predict(&realized, dt);
        match &mut controller {
            Controller::Wmpc { wrench, rate, .. } => {
                *wrench = *wrench + Wrench::new(rate.force * dt, rate.torque * dt);
            }
            Controller::Ampc {
                command,
                tilt_rate,
                thrust_rate,
                ..
            } => {
                command.tilt += &*tilt_rate * dt;
                command.thrust += &*thrust_rate * dt;
            }
        }
        if !truth.is_finite() || truth.position.amax() > 1e3 {
            return Err(SimError::Diverged { time: t });
        }
    }
    log.rejected_measurements = observer.rejected();
    log.training = training;
    Ok(log)
}

fn force_violation(bounds: &WrenchBox, w: &Wrench) -> f64 {
    let d = (w.force - bounds.center.force).abs() - bounds.half_width.force;
    d.max().max(0.0)
}

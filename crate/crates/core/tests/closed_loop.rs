use nalgebra::{DMatrix, Vector3};
use omav_core::config::{ControllerKind, ExperimentConfig};
use omav_core::controllers::ResidualMode;
use omav_core::dynamics::{rk4_step, RigidState, Wrench};
use omav_core::experiment::simulate;
use omav_core::metrics::tracking_rmse;
use omav_core::residual::{ResidualModel, N_COLUMNS};
use omav_core::sim::{DisturbanceConfig, DisturbanceKind, Episode, TrueDisturbance};
use omav_core::so3::UnitQuaternion;
use omav_core::trajectories::{TrajectoryKind, TrajectorySpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn noiseless(kind: ControllerKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::reference_platform();
    cfg.controller.kind = kind;
    cfg.sim.sensors.position_std = 0.0;
    cfg.sim.sensors.attitude_std = 0.0;
    cfg.trajectory = TrajectorySpec::preset(TrajectoryKind::Hover);
    cfg
}

#[test]
fn both_controllers_hold_hover_without_noise() {
    for kind in [ControllerKind::Wmpc, ControllerKind::Ampc] {
        let (log, report) = simulate(&noiseless(kind)).unwrap();
        let worst = log
            .rows
            .iter()
            .map(|r| (r.state.position - r.reference.position).norm())
            .fold(0.0, f64::max);
        assert!(worst < 1e-3, "{kind:?}: worst position error {worst}");
        assert!(report.rmse.position < 1e-3);
        assert_eq!(report.constraints.wrench_box_violations, 0);
        assert!((log.duration() - 10.0).abs() < 1e-9);
    }
}

#[test]
fn uncontrolled_plant_sinks_under_downward_disturbance() {
    let cfg = ExperimentConfig::reference_platform();
    let params = cfg.platform.inertial().unwrap();
    let truth = TrueDisturbance::new(&DisturbanceConfig {
        kind: DisturbanceKind::ConstantLocal,
        force: [0.0, 0.0, -2.0],
        ..DisturbanceConfig::default()
    })
    .unwrap();
    let hover = Wrench::new(Vector3::new(0.0, 0.0, params.mass * 9.81), Vector3::zeros());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut x = RigidState::at_rest(Vector3::new(0.0, 0.0, 1.0), UnitQuaternion::identity());
    let dt = 1e-3;
    for _ in 0..1000 {
        let d = truth.evaluate(&hover, &x.attitude, &mut rng);
        x = rk4_step(&x, &hover, &d, &params, dt);
    }
    let accel: f64 = 2.0 / params.mass;
    assert!((accel - 0.459).abs() < 5e-4);
    assert!((x.velocity.z + accel).abs() < 1e-9, "{}", x.velocity.z);
    assert!((x.position.z - (1.0 - 0.5 * accel)).abs() < 1e-9);
}

#[test]
fn exact_post_correction_beats_no_correction() {
    let force = [1.5, -1.0, -2.0];
    let torque = [0.1, 0.05, -0.05];
    let mut cfg = ExperimentConfig::reference_platform();
    cfg.trajectory = TrajectorySpec::preset(TrajectoryKind::StepX);
    cfg.disturbance.kind = DisturbanceKind::ConstantLocal;
    cfg.disturbance.force = force;
    cfg.disturbance.torque = torque;
    cfg.sim.duration = Some(4.0);

    // At zero yaw the local frame is the body frame, so the bias column is exact.
    let mut model = ResidualModel::zero();
    model.coefficients = DMatrix::zeros(6, N_COLUMNS);
    for i in 0..3 {
        model.coefficients[(i, N_COLUMNS - 1)] = force[i];
        model.coefficients[(i + 3, N_COLUMNS - 1)] = torque[i];
    }

    let run = |mode: ResidualMode| {
        let mut c = cfg.clone();
        c.residual.mode = mode;
        c.residual.model = Some("unused.json".into());
        let log = Episode::with_model(c, Some(model.clone())).unwrap().run().unwrap();
        tracking_rmse(&log).unwrap()
    };
    let none = run(ResidualMode::None);
    let post = run(ResidualMode::PostMpc);
    assert!(post.position < none.position, "{} vs {}", post.position, none.position);
    assert!(post.attitude < none.attitude, "{} vs {}", post.attitude, none.attitude);
}

#[test]
fn reruns_are_identical_and_seeds_differ() {
    let mut cfg = ExperimentConfig::reference_platform();
    cfg.trajectory = TrajectorySpec::preset(TrajectoryKind::LemniscateSlow);
    cfg.sim.duration = Some(1.5);
    cfg.disturbance.kind = DisturbanceKind::LinearFeatures;
    cfg.disturbance.noise_std = [0.3, 0.3, 0.3, 0.01, 0.01, 0.01];
    cfg.residual.mode = ResidualMode::Observer;
    let a = simulate(&cfg).unwrap().0.to_csv_string();
    let b = simulate(&cfg).unwrap().0.to_csv_string();
    assert!(a == b);
    cfg.seed += 1;
    let c = simulate(&cfg).unwrap().0.to_csv_string();
    assert!(a != c);
}

#[test]
fn training_log_is_recorded_at_the_imu_rate() {
    let mut cfg = ExperimentConfig::reference_platform();
    cfg.sim.duration = Some(1.0);
    let (log, _) = simulate(&cfg).unwrap();
    let n = log.training.samples.len();
    assert!((199..=201).contains(&n), "{n} samples");
    assert!((log.training.period().unwrap() - 1.0 / cfg.sim.sensors.imu_rate).abs() < 1e-9);
}

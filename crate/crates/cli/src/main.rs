use clap::{Parser, Subcommand};
use omav_core::config::ExperimentConfig;
use omav_core::experiment::{self, ExperimentError, MatrixConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "omav", version, about = "Simulation experiments for wrench- and actuator-level NMPC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write its log, report and resolved config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also write the IMU training log.
        #[arg(long)]
        log_imu: bool,
    },
    /// Run a set of configurations over a set of trajectories.
    Matrix {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long, default_value_t = default_jobs())]
        jobs: usize,
    },
    /// Fit a residual model to one or more IMU logs.
    Train {
        /// Experiment config supplying the platform; the default platform otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// IMU log written by `run --log-imu`; repeat to stack several.
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        #[arg(long, default_value_t = omav_core::residual::DEFAULT_LAMBDA)]
        lambda: f64,
        /// Feature set; only the default set is available.
        #[arg(long, default_value = "default")]
        features: String,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Convert a run log into long-format `time,channel,value` CSV.
    Plotdata {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config and print it fully resolved.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, out_dir: Option<PathBuf>, log_imu: bool) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(d) = out_dir {
        cfg.output.dir = d;
    }
    cfg.output.log_imu |= log_imu;
}

fn dispatch(cmd: Command) -> Result<(), ExperimentError> {
    match cmd {
        Command::Run {
            config,
            seed,
            out_dir,
            log_imu,
        } => {
            let loaded = experiment::load_config(&config)?;
            let mut cfg = loaded.config;
            apply_overrides(&mut cfg, seed, out_dir, log_imu);
            let out = experiment::run(&cfg, Some(&loaded.raw), &cfg.output.dir)?;
            println!("{}", experiment::summary_line(&out.report));
            log::info!("log written to {}", out.log_path.display());
        }
        Command::Matrix {
            config,
            seed,
            out_dir,
            jobs,
        } => {
            let m = MatrixConfig::load(&config)?;
            let dir = out_dir.unwrap_or_else(|| PathBuf::from("out"));
            let out = experiment::matrix(&m, &dir, jobs, seed)?;
            print!("{}", out.table);
            for r in out.reports.iter().filter_map(|r| r.as_ref().err()) {
                eprintln!("episode failed: {r}");
            }
            println!("table written to {}", out.table_path.display());
        }
        Command::Train {
            config,
            logs,
            lambda,
            features,
            out,
        } => {
            if features != "default" {
                return Err(ExperimentError::Input(format!("unknown feature set '{features}'")));
            }
            let cfg = match config {
                Some(p) => experiment::load_config(&p)?.config,
                None => ExperimentConfig::reference_platform(),
            };
            let params = cfg
                .platform
                .inertial()
                .map_err(|e| ExperimentError::Input(format!("platform: {e}")))?;
            let report = experiment::train_files(&logs, &params, lambda, &out)?;
            println!("{} samples, lambda = {}", report.samples, report.lambda);
            print!("{}", report.table());
            println!("model written to {}", out.display());
        }
        Command::Plotdata { log, out } => {
            let out = out.unwrap_or_else(|| PathBuf::from(log.to_string_lossy().replace(".csv", ".long.csv")));
            let rows = experiment::plotdata(&log, &out)?;
            println!("{rows} rows written to {}", out.display());
        }
        Command::ValidateConfig { config } => {
            let loaded = experiment::load_config(&config)?;
            let resolved = loaded.config.resolved(Some(&loaded.raw));
            println!("{}", serde_json::to_string_pretty(&resolved).expect("json value"));
        }
    }
    Ok(())
}

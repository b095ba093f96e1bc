use std::path::Path;
use std::process::{Command, Output};

fn omav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_omav")).args(args).output().unwrap()
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(format!("{name}.toml"));
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const SHORT: &str = r#"
name = "short"
seed = 3

[platform]
mass = 4.36

[trajectory]
kind = "step-x"

[sim]
duration = 0.5
"#;

#[test]
fn run_succeeds_and_reruns_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", SHORT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = omav(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stdout).contains("position RMSE"));
    }
    let first = std::fs::read(a.join("short.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("short.csv")).unwrap());

    // The resolved config written next to the log reproduces the run.
    let c = dir.path().join("c");
    let resolved = a.join("short.resolved.json");
    let o = omav(&["run", "--config", resolved.to_str().unwrap(), "--out-dir", c.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(first, std::fs::read(c.join("short.csv")).unwrap());
}

#[test]
fn seed_override_changes_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", SHORT);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(omav(&["run", "--config", &cfg, "--out-dir", a.to_str().unwrap()]).status.success());
    let o = omav(&["run", "--config", &cfg, "--seed", "4", "--out-dir", b.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(
        std::fs::read(a.join("short.csv")).unwrap(),
        std::fs::read(b.join("short.csv")).unwrap()
    );
}

#[test]
fn missing_mass_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad", "[platform]\ninertia = [0.1, 0.1, 0.2]\n");
    for verb in ["run", "validate-config"] {
        let o = omav(&[verb, "--config", &cfg]);
        assert_eq!(o.status.code(), Some(2), "{verb}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("mass"));
    }
}

#[test]
fn out_of_range_values_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad",
        "[platform]\nmass = 4.36\n\n[controller.ampc]\nthrust_min = 20.0\n",
    );
    let o = omav(&["validate-config", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("thrust"));
}

#[test]
fn validate_config_prints_resolved_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "short", SHORT);
    let o = omav(&["validate-config", "--config", &cfg]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["config"]["platform"]["mass"], 4.36);
    assert_eq!(v["config"]["controller"]["ampc"]["tilt_rate_max"], 10.0);
}

#[test]
fn train_and_plotdata_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "square",
        r#"
name = "square"

[platform]
mass = 4.36

[disturbance]
kind = "linear-features"

[trajectory]
kind = "square"

[sim]
duration = 2.0
"#,
    );
    let out = dir.path().join("out");
    let o = omav(&["run", "--config", &cfg, "--log-imu", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let imu = out.join("square.imu.csv");
    let model = dir.path().join("model.json");
    let o = omav(&[
        "train",
        "--log",
        imu.to_str().unwrap(),
        "--lambda",
        "1",
        "--out",
        model.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("Raw") && table.contains("Model"));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&model).unwrap()).unwrap();
    assert_eq!(json["coefficients"].as_array().unwrap().len(), 6);

    let long = dir.path().join("long.csv");
    let o = omav(&["plotdata", "--log", out.join("square.csv").to_str().unwrap(), "--out", long.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&long).unwrap().lines().count() > 2000);

    let o = omav(&["train", "--log", imu.to_str().unwrap(), "--features", "quadratic"]);
    assert_eq!(o.status.code(), Some(1));
}

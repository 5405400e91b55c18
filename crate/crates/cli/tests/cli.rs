//! Exit codes and artifact chaining of the command-line driver.

use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 2

[workload]
train_count = 400
calib_count = 1500
eval_count = 400

[router]
epochs = 3
"#;

fn run(dir: &Path, config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tierroute"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .expect("spawn")
}

fn setup(body: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("cfg.toml");
    std::fs::write(&config, body).unwrap();
    (tmp, config)
}

#[test]
fn unknown_config_key_exits_with_config_code() {
    let (tmp, config) = setup("[workload]\nbogus = 1\n");
    assert_eq!(run(tmp.path(), &config, &["generate"]).status.code(), Some(2));
}

#[test]
fn invalid_config_value_exits_with_config_code() {
    let (tmp, config) = setup("[calibration]\nalpha = 1.5\n");
    assert_eq!(run(tmp.path(), &config, &["generate"]).status.code(), Some(2));
}

#[test]
fn missing_config_file_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &tmp.path().join("absent.toml"), &["generate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_without_router_reports_missing_dependency() {
    let (tmp, config) = setup(TINY);
    let out = run(tmp.path(), &config, &["calibrate"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("router.ckpt"));
}

#[test]
fn simulate_without_thresholds_reports_missing_dependency() {
    let (tmp, config) = setup(TINY);
    assert!(run(tmp.path(), &config, &["train-router"]).status.success());
    assert_eq!(run(tmp.path(), &config, &["simulate"]).status.code(), Some(3));
}

#[test]
fn chained_run_writes_artifacts_and_manifest() {
    let (tmp, config) = setup(TINY);
    for args in [&["train-router"][..], &["calibrate"], &["simulate", "--policy", "routed"]] {
        let out = run(tmp.path(), &config, args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let dir = tmp.path().join("out");
    for f in ["router.ckpt", "training_report.json", "thresholds.csv", "traces_routed.csv", "metrics_routed.json"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 2);
    assert!(manifest["config_sha256"].as_str().is_some_and(|s| s.len() == 64));
}

#[test]
fn seed_flag_overrides_config_seed() {
    let (tmp, config) = setup(TINY);
    let out = run(tmp.path(), &config, &["--seed", "9", "generate"]);
    assert!(out.status.success());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(tmp.path().join("out/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 9);
}

#[test]
fn shipped_reference_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml");
    let text = std::fs::read_to_string(path).unwrap();
    assert_eq!(tierroute::config::RunConfig::from_toml(&text).unwrap(), tierroute::config::RunConfig::default());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vectorquad"));
    cmd.env_remove("VECTORQUAD_CONFIG_DIR");
    cmd
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn schema_validator() -> jsonschema::Validator {
    let schema = read_json(&Path::new(env!("CARGO_MANIFEST_DIR")).join("summary.schema.json"));
    jsonschema::validator_for(&schema).expect("schema compiles")
}

fn assert_matches_schema(summary: &Value) {
    let validator = schema_validator();
    let errors: Vec<String> = validator.iter_errors(summary).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "summary violates schema: {errors:?}\n{summary}");
}

#[test]
fn hover_writes_log_plots_and_summary() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("hover");
    let out = bin()
        .args(["hover", "--config-dir"])
        .arg(configs_dir())
        .args(["--duration", "10", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));

    let summary = read_json(&out_dir.join("summary.json"));
    assert_matches_schema(&summary);
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["scenario"], "hover");
    let pos: Vec<f64> = summary["steady_position_error"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    let rot: Vec<f64> =
        summary["steady_rotation_error_deg"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!(pos.iter().all(|e| *e < 0.005), "{pos:?}");
    assert!(rot.iter().all(|e| *e < 0.5), "{rot:?}");

    let line: Value = serde_json::from_str(stdout(&out).lines().next().unwrap()).unwrap();
    assert_eq!(line, summary);

    let log = fs::read_to_string(out_dir.join("log.csv")).unwrap();
    let mut lines = log.lines();
    assert!(lines.next().unwrap().starts_with("time,"));
    assert_eq!(lines.count(), summary["ticks"].as_u64().unwrap() as usize);
    for name in ["position_errors", "rotation_errors", "joint_trajectories", "joint_torques", "rotor_thrusts"] {
        let text = fs::read_to_string(out_dir.join("plots").join(format!("{name}.csv"))).unwrap();
        assert_eq!(text.lines().next().unwrap(), "time,series,value", "{name}");
        assert!(text.lines().count() > 1, "{name}");
    }
}

#[test]
fn verify_allocation_passes_and_reports() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .args(["verify-allocation", "--cases", "1000", "--jobs", "4", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stdout: {}\nstderr: {}", stdout(&out), stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("1000 cases"), "{text}");
    assert!(text.contains("PASS"), "{text}");

    let report = read_json(&tmp.path().join("verify_allocation.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["report"]["cases"], 1000);
    assert_eq!(report["report"]["failures"], 0);
    assert!(report["report"]["max_wrench_residual"].as_f64().unwrap() < 1e-6);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("fly").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"), "{}", stderr(&out));
}

#[test]
fn zero_jobs_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let out = bin().args(["hover", "--jobs", "0", "--out"]).arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_exits_with_config_status() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .args(["hover", "--config"])
        .arg(tmp.path().join("absent.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(line["status"], "config");
    assert!(line["failure"].as_str().unwrap().contains("absent.toml"));
}

#[test]
fn malformed_config_exits_with_config_status() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "[sim]\ntimestep = \"fast\"\n").unwrap();
    let out = bin().args(["walk", "--config"]).arg(&path).arg("--out").arg(tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let line: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(line["status"], "config");
}

#[test]
fn infeasible_thrust_limit_is_a_run_failure() {
    let tmp = TempDir::new().unwrap();
    let path = tmp.path().join("weak.toml");
    fs::write(&path, "[aerial]\nmax_thrust = 5.0\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin()
        .args(["hover", "--duration", "1", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "stderr: {}", stderr(&out));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_matches_schema(&summary);
    assert_eq!(summary["status"], "infeasible");
    assert!(summary["failure_time"].is_number());
    assert!(summary["infeasibility_events"].as_u64().unwrap() >= 1);
}

#[test]
fn multiple_runs_fan_out_over_seeds() {
    let tmp = TempDir::new().unwrap();
    let out = bin()
        .args(["hover", "--duration", "1", "--runs", "2", "--jobs", "2", "--seed", "7", "--out"])
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 2);
    for seed in [7, 8] {
        let dir = tmp.path().join(format!("seed-{seed}"));
        assert_matches_schema(&read_json(&dir.join("summary.json")));
        assert!(dir.join("log.csv").is_file());
    }
}

#[test]
fn config_dir_is_read_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("scenario.toml"), "duration = 0.5\n").unwrap();
    let out_dir = tmp.path().join("out");
    let out = bin()
        .env("VECTORQUAD_CONFIG_DIR", tmp.path())
        .arg("hover")
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr(&out));
    let summary = read_json(&out_dir.join("summary.json"));
    assert_eq!(summary["ticks"], 50);

    let out = bin().env("VECTORQUAD_CONFIG_DIR", tmp.path().join("missing")).arg("hover").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn same_seed_gives_identical_logs() {
    let tmp = TempDir::new().unwrap();
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = bin()
            .args(["transform", "--config-dir"])
            .arg(configs_dir())
            .args(["--duration", "2", "--seed", "3", "--out"])
            .arg(&dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr(&out));
        fs::read(dir.join("log.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn hilqr(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hilqr"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, json).unwrap();
    path.display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_a_drop() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilqr(&["simulate", "--out", "run"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("run/trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,mode,x0,x1,u0"));
    assert_eq!(lines.count(), 1001);
    let events = json(&dir.path().join("run/events.json"));
    let impacts: Vec<_> = events
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["source"] == 0 && e["target"] == 1)
        .collect();
    assert_eq!(impacts.len(), 1);
    assert_eq!(impacts[0]["knot"], 903);
}

#[test]
fn hover_has_no_events() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "hover.json",
        r#"{"simulate": {"input": [9.81]}}"#,
    );
    let out = hilqr(&["simulate", "--config", &cfg, "--out", "run"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(
        json(&dir.path().join("run/events.json")),
        Value::Array(vec![])
    );
}

#[test]
fn malformed_configs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "bad.json",
        "{\n  \"system\": {\"mass\": 1.0,\n  \"gravty\": 9.81}\n}",
    );
    let out = hilqr(&["simulate", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gravty") && err.contains("line 3"), "{err}");

    let cfg = write_config(dir.path(), "neg.json", r#"{"system": {"mass": -1.0}}"#);
    assert_eq!(
        hilqr(&["simulate", "--config", &cfg], dir.path())
            .status
            .code(),
        Some(2)
    );
    let out = hilqr(&["mpc", "--perturb", "z"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = hilqr(&["launch"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn solve_writes_a_converged_reference() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilqr(&["solve", "--out", "ref"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report = json(&dir.path().join("ref/report.json"));
    assert_eq!(report["converged"], true);
    assert_eq!(report["knots"], 1001);
    assert!(report["terminal_error"].as_f64().unwrap() <= 1e-3);
    let history: Vec<f64> = report["cost_history"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c.as_f64().unwrap())
        .collect();
    assert!(history.windows(2).all(|w| w[1] < w[0]));
    for file in [
        "reference.csv",
        "reference_events.json",
        "extensions.json",
        "gains.json",
    ] {
        assert!(dir.path().join("ref").join(file).exists(), "{file}");
    }
}

#[test]
fn unreachable_goal_exits_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "short.json",
        r#"{"reference": {"duration": 0.1}}"#,
    );
    let out = hilqr(&["solve", "--config", &cfg, "--out", "ref"], dir.path());
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn check_passes_and_catches_a_wrong_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilqr(&["check", "--seed", "7"], dir.path());
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(!text.contains("[FAIL]"));
    assert!(text.contains("saltation matrix vs closed form"));

    let cfg = write_config(
        dir.path(),
        "fault.json",
        r#"{"check": {"oracle_restitution": 0.7}}"#,
    );
    let out = hilqr(&["check", "--config", &cfg], dir.path());
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stdout).contains("[FAIL] saltation matrix vs closed form"));
}

#[test]
fn unperturbed_mpc_tracks_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = hilqr(&["mpc", "--perturb", "z:0", "--out", "mpc"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let summary = json(&dir.path().join("mpc/summary.json"));
    let run = &summary["runs"][0];
    assert_eq!(run["n_steps"], 1001);
    assert_eq!(run["n_nonconverged"], 0);
    assert!(run["max_tracking_error"].as_f64().unwrap() <= 1e-6);
    assert!(run["mean_solve_ms"].as_f64().is_some());
}

/// The solved reference and a simulated trajectory are both usable as MPC
/// references, and repeated runs produce identical data files.
#[test]
fn written_trajectories_feed_mpc_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        hilqr(&["solve", "--out", "ref"], dir.path()).status.code(),
        Some(0)
    );
    let cfg = write_config(
        dir.path(),
        "files.json",
        r#"{"reference_files": {"trajectory": "ref/reference.csv", "events": "ref/reference_events.json", "extensions": "ref/extensions.json"},
            "perturbation": {"component": "zdot", "magnitude": -0.3}}"#,
    );
    for out in ["a", "b"] {
        let o = hilqr(&["mpc", "--config", &cfg, "--out", out], dir.path());
        assert_eq!(
            o.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&o.stderr)
        );
    }
    let a = fs::read(dir.path().join("a/closed_loop.csv")).unwrap();
    let b = fs::read(dir.path().join("b/closed_loop.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        json(&dir.path().join("a/summary.json"))["runs"][0]["n_nonconverged"],
        0
    );

    // Solving again gives byte-identical reference files.
    assert_eq!(
        hilqr(&["solve", "--out", "ref2"], dir.path()).status.code(),
        Some(0)
    );
    for file in [
        "reference.csv",
        "reference_events.json",
        "extensions.json",
        "gains.json",
        "report.json",
    ] {
        assert_eq!(
            fs::read(dir.path().join("ref").join(file)).unwrap(),
            fs::read(dir.path().join("ref2").join(file)).unwrap(),
            "{file}"
        );
    }

    assert_eq!(
        hilqr(&["simulate", "--out", "sim"], dir.path())
            .status
            .code(),
        Some(0)
    );
    let cfg = write_config(
        dir.path(),
        "sim.json",
        r#"{"reference_files": {"trajectory": "sim/trajectory.csv", "events": "sim/events.json"},
            "perturbation": {"component": "z", "magnitude": 0.0}}"#,
    );
    let o = hilqr(&["mpc", "--config", &cfg, "--out", "simmpc"], dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let run = &json(&dir.path().join("simmpc/summary.json"))["runs"][0];
    assert!(run["max_tracking_error"].as_f64().unwrap() <= 1e-6);
}

#[test]
fn missing_reference_files_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "missing.json",
        r#"{"reference_files": {"trajectory": "nope.csv", "events": "nope.json"}}"#,
    );
    assert_eq!(
        hilqr(&["mpc", "--config", &cfg], dir.path()).status.code(),
        Some(2)
    );
}

//! The command-line binary: exit codes and the files it writes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn swarm_nav(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_swarm-nav"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Metrics without the wall-clock fields, which differ between runs.
fn metrics(dir: &Path) -> Value {
    let mut m = json(&dir.join("metrics.json"));
    m.as_object_mut().unwrap().remove("compute");
    m
}

fn scenario_hash(stdout: &[u8]) -> String {
    let s = String::from_utf8_lossy(stdout);
    let at = s.find("sha256 ").expect("hash printed") + 7;
    s[at..at + 64].to_string()
}

#[test]
fn run_writes_artifacts_and_reports_success() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["run", "--env", "swap", "--n", "2", "--seed", "0", "--method", "mgr", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["scenario.json", "config.json", "trace.jsonl", "metrics.json", "timing.json"] {
        assert!(dir.path().join(f).is_file(), "missing {f}");
    }
    assert_eq!(metrics(dir.path())["success"], Value::Bool(true));
    let timing = json(&dir.path().join("timing.json"));
    assert_eq!(timing["locality"]["violations"], 0);
}

#[test]
fn failed_run_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["run", "--env", "swap", "--n", "2", "--method", "clf-cbf", "--time-limit", "20", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(metrics(dir.path())["success"], Value::Bool(false));
}

#[test]
fn bad_parameters_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["run", "--k-d", "3.0", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("k_d") || stderr.contains("k-d"), "{stderr}");

    let out = swarm_nav(&["replay", path(&dir.path().join("no-such.json"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = swarm_nav(&["run", "--env", "nowhere"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn replay_reproduces_the_run() {
    let first = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["run", "--env", "circ15", "--n", "6", "--seed", "3", "--out", path(first.path())]);
    let hash = scenario_hash(&out.stdout);

    let second = tempfile::tempdir().unwrap();
    let scenario = first.path().join("scenario.json");
    let config = first.path().join("config.json");
    let out = swarm_nav(&["replay", path(&scenario), "--config", path(&config), "--out", path(second.path())]);
    assert!(matches!(out.status.code(), Some(0 | 2)));
    assert_eq!(scenario_hash(&out.stdout), hash);
    assert_eq!(metrics(first.path()), metrics(second.path()));
    assert_eq!(
        fs::read(first.path().join("trace.jsonl")).unwrap(),
        fs::read(second.path().join("trace.jsonl")).unwrap()
    );

    let third = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["replay", path(&scenario), "--method", "clf-cbf", "--out", path(third.path())]);
    assert_eq!(scenario_hash(&out.stdout), hash);
    assert_eq!(json(&third.path().join("config.json"))["params"]["method"], "clf-cbf");
}

#[test]
fn batch_with_no_seeds_writes_only_the_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["batch", "--env", "swap", "--n", "2", "--seeds", "0", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1, "{csv}");
    assert!(fs::read_to_string(dir.path().join("runs.jsonl")).unwrap().is_empty());
}

#[test]
fn batch_tabulates_each_method() {
    let dir = tempfile::tempdir().unwrap();
    let out = swarm_nav(&["batch", "--env", "swap", "--n", "2", "--seeds", "2", "--method", "mgr,clf-cbf", "--out", path(dir.path())]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("table.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2, "{csv}");
    let runs = fs::read_to_string(dir.path().join("runs.jsonl")).unwrap();
    assert_eq!(runs.lines().count(), 4);
}

#[test]
fn plot_data_exports_positions() {
    let dir = tempfile::tempdir().unwrap();
    swarm_nav(&["run", "--env", "swap", "--n", "2", "--out", path(dir.path())]);
    let plots = dir.path().join("plots");
    let out = swarm_nav(&["plot-data", path(&dir.path().join("trace.jsonl")), "--out", path(&plots)]);
    assert_eq!(out.status.code(), Some(0));
    let csv = fs::read_to_string(plots.join("positions.csv")).unwrap();
    // The trace starts with a schema line; the CSV with a column header.
    let records = fs::read_to_string(dir.path().join("trace.jsonl")).unwrap().lines().count() - 1;
    assert_eq!(csv.lines().count(), 2 * records + 1);
}

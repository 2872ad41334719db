use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn run(dir: &Path, args: &[&str]) -> Output {
    let out_dir = format!("output.dir={}", dir.join("runs").display());
    Command::new(env!("CARGO_BIN_EXE_periodic-harris"))
        .args(args)
        .args(["--set", &out_dir])
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Run directories in creation order.
fn run_dirs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn report(dir: &Path, name: &str) -> Value {
    let path = run_dirs(dir).into_iter().rev().map(|d| d.join(format!("{name}.json"))).find(|p| p.exists()).unwrap();
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn missing_config_file_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["simulate", "--config", "absent.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.toml"));
}

#[test]
fn cir_level_constraint_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["simulate", "--set", "model.a=0.4"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2a > 1"));
}

#[test]
fn commands_needing_a_period_reject_the_deterministic_model() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["hoermander", "--set", "model.kind=hh"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("runs").exists() || run_dirs(tmp.path()).is_empty());
}

#[test]
fn same_seed_gives_identical_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["simulate", "--set", "model.kind=ou", "--set", "sim.horizon=50", "--set", "sim.seed=5"];
    assert_eq!(run(tmp.path(), &args).status.code(), Some(0));
    let first = run_dirs(tmp.path()).pop().unwrap();
    let a = std::fs::read(first.join("simulate.json")).unwrap();
    let pa = std::fs::read(first.join("path.bin")).unwrap();
    std::fs::rename(&first, tmp.path().join("first")).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_periodic-harris"))
        .args(args)
        .args(["--set", &format!("output.dir={}", tmp.path().join("runs").display())])
        .env("PERIODIC_HARRIS_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let second = run_dirs(tmp.path()).pop().unwrap();
    assert_eq!(a, std::fs::read(second.join("simulate.json")).unwrap());
    assert_eq!(pa, std::fs::read(second.join("path.bin")).unwrap());
    assert!(second.file_name().unwrap().to_str().unwrap().ends_with(report(tmp.path(), "simulate")["config_hash"].as_str().unwrap()));
}

#[test]
fn reports_carry_the_reproducibility_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["simulate", "--set", "model.kind=toy", "--set", "sim.horizon=5", "--set", "sim.seed=77"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(tmp.path(), "simulate");
    assert_eq!(r["seed"], 77);
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["config_hash"].as_str().unwrap().len(), 16);
    assert_eq!(r["config"]["model"]["kind"], "toy");
    let dir = run_dirs(tmp.path()).pop().unwrap();
    let csv = std::fs::read_to_string(dir.join("path.csv")).unwrap();
    assert!(csv.starts_with("t,xi,psi\n"));
    assert_eq!(csv.lines().count(), 502);
}

#[test]
fn config_file_and_overrides_combine() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("run.toml"), "[model]\nkind = \"toy\"\n[sim]\nseed = 3\nhorizon = 2.0\n").unwrap();
    let o = run(tmp.path(), &["simulate", "--config", "run.toml", "--set", "sim.seed=4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = report(tmp.path(), "simulate");
    assert_eq!(r["seed"], 4);
    assert_eq!(r["config"]["sim"]["horizon"], 2.0);
}

#[test]
fn toy_validate_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["toy-validate", "--set", "model.kind=toy"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = report(tmp.path(), "toy-validate");
    let rows = r["result"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|row| row["z_mean"].as_f64().unwrap().abs() < 3.0));
}

#[test]
fn toy_validate_needs_the_toy_model() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["toy-validate"]).status.code(), Some(2));
}

#[test]
fn hoermander_on_the_toy_model() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["hoermander", "--set", "model.kind=toy"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("minimal N = 1"));
    let o = run(tmp.path(), &["hoermander", "--set", "model.kind=toy", "--set", "model.c=2", "--set", "hoermander.extra_times=[0.16666666666666666]", "--set", "hoermander.n_max=1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("not established"));
}

#[test]
fn control_on_the_ou_suite() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["control", "--set", "model.kind=ou"]);
    assert_eq!(o.status.code(), Some(0));
    let r = report(tmp.path(), "control");
    let runs = r["result"]["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 10);
    assert!(runs.iter().all(|x| x["terminal_distance"].as_f64().unwrap() < 1e-2));
}

#[test]
fn lyapunov_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(tmp.path(), &["lyapunov", "--set", "lyapunov.replicas=50"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = report(tmp.path(), "lyapunov");
    assert_eq!(r["result"]["points"].as_array().unwrap().len(), 20);
    assert!(r["result"]["fit"]["lambda"].as_f64().unwrap() < 1.0);
}

#[test]
fn isi_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        tmp.path(),
        &["isi", "--set", "model.kind=ou", "--set", "sim.replicas=2", "--set", "isi.total_isis=200", "--set", "isi.block=100", "--set", "isi.split_half_bound=1.0"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let r = report(tmp.path(), "isi");
    assert_eq!(r["result"]["replicas"].as_array().unwrap().len(), 2);
    assert_eq!(r["result"]["pooled_isis"], 400);
}

#[test]
fn bad_overrides_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(run(tmp.path(), &["simulate", "--set", "sim.dt=-1"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["simulate", "--set", "sim.nope=1"]).status.code(), Some(2));
    assert_eq!(run(tmp.path(), &["isi", "--set", "isi.block=10", "--set", "model.kind=ou"]).status.code(), Some(2));
}

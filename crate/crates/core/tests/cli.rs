//! The `qsalab` binary: exit codes, output routing, artifact layout and
//! replay from a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
preset = "grid1x3"
stepsizes = [0.1, 0.2]
schedules = [{ kind = "polynomial", exponent = 0.75 }]
n = 20000
replications = 2
master_seed = 5
pipelines = ["solve", "figure1", "rr"]
"#;

fn qsalab(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qsalab"));
    cmd.args(args).env_remove("QSALAB_OUT");
    if let Some(dir) = env_out {
        cmd.env("QSALAB_OUT", dir);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("spec.toml");
    fs::write(&path, body).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = qsalab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["solve.csv", "figure1.csv", "rr.csv", "summary.csv", "manifest.toml"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    assert!(!out.join("FAILED").exists());
    let fig = fs::read_to_string(out.join("figure1.csv")).unwrap();
    assert_eq!(fig.lines().next(), Some("k,schedule_id,alpha,metric,value"));
    let rr = fs::read_to_string(out.join("rr.csv")).unwrap();
    assert_eq!(rr.lines().next(), Some("alpha,estimator,l1_error,l1_error_se,l1_bias"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next(), Some("pipeline,key,metric,value"));
}

#[test]
fn subcommand_runs_only_its_pipeline() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = qsalab(&["solve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 0);
    assert!(out.join("solve.csv").exists());
    assert!(!out.join("figure1.csv").exists());
}

#[test]
fn env_var_sets_output_dir_and_flag_beats_it() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let env_dir = tmp.path().join("env");
    let res = qsalab(&["solve", "--config", cfg.to_str().unwrap()], Some(&env_dir));
    assert_eq!(code(&res), 0);
    assert!(env_dir.join("solve.csv").exists());

    let flag_dir = tmp.path().join("flag");
    let other = tmp.path().join("other");
    let res = qsalab(&["solve", "--config", cfg.to_str().unwrap(), "--out", flag_dir.to_str().unwrap()], Some(&other));
    assert_eq!(code(&res), 0);
    assert!(flag_dir.join("solve.csv").exists());
    assert!(!other.exists());
}

#[test]
fn invalid_config_exits_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &SMALL.replace("stepsizes = [0.1, 0.2]", "stepsizes = [1.5]"));
    let out = tmp.path().join("out");
    let res = qsalab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 2);
    assert!(!out.exists());

    let unknown = write_config(tmp.path(), &format!("{SMALL}\nbogus = 1\n"));
    assert_eq!(code(&qsalab(&["validate", "--config", unknown.to_str().unwrap()], None)), 2);

    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&qsalab(&["validate", "--config", missing.to_str().unwrap()], None)), 2);
}

#[test]
fn numerical_failure_exits_three_and_marks_output() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "preset = \"grid1x3\"\nstepsizes = [0.001]\nn = 5\nmaster_seed = 1\npipelines = [\"solve\", \"convergence\"]\n",
    );
    let out = tmp.path().join("out");
    let res = qsalab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("FAILED").exists());
    assert!(out.join("solve.csv").exists());
    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("status = \"failed\""), "{manifest}");
}

#[test]
fn validate_reports_without_writing() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let res = qsalab(&["validate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&res), 0);
    assert!(String::from_utf8_lossy(&res.stdout).trim_end().ends_with("ok"));
    assert!(!out.exists());
}

#[test]
fn same_seed_same_bytes_and_manifest_replays() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    assert_eq!(code(&qsalab(&["figure1", "--config", &s(&cfg), "--out", &s(&a)], None)), 0);
    assert_eq!(code(&qsalab(&["figure1", "--config", &s(&cfg), "--out", &s(&b)], None)), 0);
    let replay_cfg = a.join("manifest.toml");
    assert_eq!(code(&qsalab(&["run", "--config", &s(&replay_cfg), "--out", &s(&c)], None)), 0);
    let fig = |d: &Path| fs::read(d.join("figure1.csv")).unwrap();
    assert_eq!(fig(&a), fig(&b));
    assert_eq!(fig(&a), fig(&c));

    let d = tmp.path().join("d");
    assert_eq!(code(&qsalab(&["figure1", "--config", &s(&cfg), "--seed", "6", "--out", &s(&d)], None)), 0);
    assert_ne!(fig(&a), fig(&d));
}

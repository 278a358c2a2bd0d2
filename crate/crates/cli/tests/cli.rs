use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn popgrad(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_popgrad"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("POPGRAD_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn vector_field_run_writes_both_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = popgrad(&["symmetric_field", "--k", "5", "--grid", "10"], dir.path());
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let csv = std::fs::read_to_string(dir.path().join("symmetric_field.csv")).unwrap();
    assert!(csv.starts_with("x,y,gx,gy,kind\r\n"));
    assert_eq!(csv.lines().count(), 1 + 99 + 2);
    let report = read_json(&dir.path().join("symmetric_field.json"));
    assert_eq!(report["config"]["k"], 5);
    assert_eq!(report["config"]["grid"], 10);
    assert_eq!(report["config"]["experiment"], "symmetric_field");
    assert_eq!(report["passed"], true);
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "noisy_init",
        "--k",
        "3",
        "--d",
        "3",
        "--runs",
        "3",
        "--seed",
        "11",
        "--set",
        "noise_levels=[0.5]",
    ];
    assert_eq!(popgrad(&args, a.path()).status.code(), Some(0));
    assert_eq!(
        popgrad(&[&args[..], &["--threads", "1"]].concat(), b.path())
            .status
            .code(),
        Some(0)
    );
    let read = |d: &Path| std::fs::read(d.join("noisy_init.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let (ra, rb) = (
        read_json(&a.path().join("noisy_init.json")),
        read_json(&b.path().join("noisy_init.json")),
    );
    assert_eq!(ra["summary"], rb["summary"]);
}

#[test]
fn config_file_and_flags_merge() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "basin", "d": 3, "trials": 150, "seed": 9}"#,
    )
    .unwrap();
    let o = popgrad(
        &[
            "basin",
            "--config",
            cfg.to_str().unwrap(),
            "--trials",
            "120",
            "--print-config",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(0));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(
        (v["d"].as_u64(), v["trials"].as_u64(), v["seed"].as_u64()),
        (Some(3), Some(120), Some(9))
    );
    assert!(!dir.path().join("basin.csv").exists());
}

#[test]
fn invalid_config_exits_one_and_names_fields() {
    let dir = tempfile::tempdir().unwrap();
    let o = popgrad(
        &[
            "basin",
            "--trials",
            "5",
            "--grid",
            "20",
            "--set",
            "epsilon=2",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    for field in ["trials", "grid", "epsilon"] {
        assert!(err.contains(field), "{err}");
    }
    let o = popgrad(
        &["scan_l12", "--config", "/nonexistent/cfg.json"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/nonexistent/cfg.json"));
}

#[test]
fn failed_threshold_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = popgrad(
        &[
            "verify_formula",
            "--d",
            "5",
            "--pairs",
            "3",
            "--set",
            "sample_sizes=[100,200]",
            "--set",
            "max_error=1e-9",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL max_error_at_largest_n"));
    assert_eq!(
        read_json(&dir.path().join("verify_formula.json"))["passed"],
        false
    );
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_popgrad"))
        .args(["symmetric_field", "--grid", "8"])
        .env("POPGRAD_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(dir.path().join("symmetric_field.csv").exists());
}

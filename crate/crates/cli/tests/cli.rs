//! End-to-end runs of the `ider` binary on a small synthetic config.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CONFIG: &str = r#"
[dataset]
name = "blobs"
kind = "blobs"
n_classes = 4
train_per_class = 24
test_per_class = 12
shape = [1, 6, 6]
spread = 0.6

[stream]
protocol = "cil"
n_tasks = 2

[model]
backbone = "desk"
width = 4

[train]
method = "er-id"
epochs_per_task = 1
batch_size = 8
buffer_capacity = 16

[output]
dir = "out"
seeds = [3, 4]
plots = ["accuracy-curve", "reliability", "idempotence-hist", "task-mass"]
"#;

fn ider(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ider"))
        .args(args)
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    std::fs::write(&p, text).unwrap();
    p
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A bundle with every wall-clock field and the output location removed.
fn without_clock(mut v: Value) -> Value {
    fn strip(v: &mut Value) {
        match v {
            Value::Object(m) => {
                m.remove("wall_clock_secs");
                m.values_mut().for_each(strip);
            }
            Value::Array(a) => a.iter_mut().for_each(strip),
            _ => {}
        }
    }
    strip(&mut v);
    v["config"]["output"].as_object_mut().unwrap().remove("dir");
    v
}

#[test]
fn run_writes_the_full_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = ider(&["run", "--config", arg(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    for f in [
        "results.json",
        "acc_matrix_seed3.csv",
        "acc_matrix_seed4.csv",
        "reliability_seed3.csv",
        "reliability_seed3.png",
        "idempotence_seed4.png",
        "accuracy_curve.png",
        "task_mass.png",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let bundle = read_json(&out.join("results.json"));
    assert_eq!(bundle["runs"].as_array().unwrap().len(), 2);
    assert_eq!(bundle["config"]["train"]["method"], "er-id");
    assert_eq!(bundle["config_hash"].as_str().unwrap().len(), 64);
    let faas: Vec<f64> = bundle["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["faa"].as_f64().unwrap())
        .collect();
    let mean = faas.iter().sum::<f64>() / 2.0;
    assert!((bundle["aggregate"]["faa"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    let csv = std::fs::read_to_string(out.join("acc_matrix_seed3.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
}

#[test]
fn same_seed_reproduces_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = ider(&[
            "run",
            "--config",
            arg(&cfg),
            "--seed",
            "7",
            "--out",
            arg(out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ra = without_clock(read_json(&a.join("results.json")));
    let rb = without_clock(read_json(&b.join("results.json")));
    assert_eq!(ra, rb);
    assert_eq!(ra["runs"][0]["seed"], 7);
}

#[test]
fn interrupted_run_resumes_from_saved_progress() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = dir.path().join("r");
    let o = ider(&[
        "run",
        "--config",
        arg(&cfg),
        "--seed",
        "5",
        "--out",
        arg(&out),
    ]);
    assert_eq!(code(&o), 0);
    let first = without_clock(read_json(&out.join("results.json")));
    std::fs::remove_file(out.join("results.json")).unwrap();
    let o = ider(&[
        "run",
        "--config",
        arg(&cfg),
        "--seed",
        "5",
        "--out",
        arg(&out),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(first, without_clock(read_json(&out.join("results.json"))));
}

#[test]
fn dry_run_prints_the_plan_without_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = ider(&[
        "dry-run",
        "--config",
        arg(&cfg),
        "--method",
        "er",
        "--alpha",
        "0.25",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("method = \"er\""), "{text}");
    assert!(text.contains("alpha = 0.25"), "{text}");
    assert!(text.contains("task 1: classes"), "{text}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        CONFIG.replace("width = 4", "width = \"four\""),
        CONFIG.replace("batch_size = 8", "batch_sise = 8"),
        CONFIG.replace("seeds = [3, 4]", "seeds = []"),
        CONFIG.replace("kind = \"blobs\"", "kind = \"idx\"\npath = \"nowhere\""),
    ];
    for text in cases {
        let cfg = write_config(dir.path(), &text);
        let o = ider(&["run", "--config", arg(&cfg)]);
        assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
        assert!(String::from_utf8_lossy(&o.stderr).starts_with("config error"));
    }
    let cfg = write_config(dir.path(), &CONFIG.replace("width = 4", "width = \"four\""));
    let o = ider(&["dry-run", "--config", arg(&cfg)]);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("width") && err.contains("line"), "{err}");
}

#[test]
fn compare_pairs_seeds_and_reports_direction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let a = dir.path().join("a");
    let o = ider(&["run", "--config", arg(&cfg), "--out", arg(&a)]);
    assert_eq!(code(&o), 0);
    let same = ider(&["compare", arg(&a), arg(&a)]);
    assert_eq!(code(&same), 3);
    let report = String::from_utf8(same.stdout).unwrap();
    for line in report.lines().skip(1).take(2) {
        assert!(line.contains("+0.0000"), "{line}");
        assert!(!line.contains('-') || line.contains("n/a"), "{line}");
    }
    let b = dir.path().join("b");
    let o = ider(&[
        "run",
        "--config",
        arg(&cfg),
        "--seed",
        "3",
        "--out",
        arg(&b),
    ]);
    assert_eq!(code(&o), 0);
    let mismatched = ider(&["compare", arg(&a), arg(&b)]);
    assert_eq!(code(&mismatched), 2);
    assert!(String::from_utf8_lossy(&mismatched.stderr).contains("different seeds"));
}

#[test]
fn stream_manifest_export() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let path = dir.path().join("manifest.json");
    let o = ider(&[
        "export-stream-manifest",
        "--config",
        arg(&cfg),
        "--manifest",
        arg(&path),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m = read_json(&path);
    assert_eq!(m["protocol"], "cil");
    assert_eq!(m["seed"], 3);
    let tasks = m["tasks"].as_array().unwrap();
    assert_eq!(tasks.len(), 2);
    for t in tasks {
        assert_eq!(t["classes"].as_array().unwrap().len(), 2);
        let total: u64 = t["per_class_counts"]
            .as_object()
            .unwrap()
            .values()
            .map(|v| v.as_u64().unwrap())
            .sum();
        assert_eq!(total, 48);
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mmgc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmgc"))
        .args(args)
        .env("MMGC_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn read_json(p: impl AsRef<Path>) -> Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

/// A small dataset and a quick condensation of it.
fn fixture(root: &Path) -> (PathBuf, PathBuf) {
    let data = path(root, "data");
    let out = mmgc(&["gen-synth", "--out", &data, "--nodes", "300", "--d-text", "8", "--d-image", "8", "--seed", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let cond = path(root, "cond");
    let out = mmgc(&[
        "condense", "--data", &data, "--out", &cond, "--ratio", "0.05", "--outer", "2", "--inner", "2", "--hidden", "16",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    (data.into(), cond.into())
}

#[test]
fn gen_synth_writes_a_finished_manifest() {
    let root = tempfile::tempdir().unwrap();
    let (data, cond) = fixture(root.path());
    let m = read_json(data.join("run_manifest.json"));
    assert_eq!(m["command"], "gen-synth");
    assert_eq!(m["status"], "ok");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["num_nodes"], 300);
    assert!(m["finished_at"].is_string());

    // The condense manifest fingerprints every consumed file.
    let m = read_json(cond.join("run_manifest.json"));
    let inputs = m["inputs"].as_object().unwrap();
    let features = data.join("features.f64").to_string_lossy().into_owned();
    let expected: String = {
        use sha2::{Digest, Sha256};
        Sha256::digest(fs::read(&features).unwrap()).iter().map(|b| format!("{b:02x}")).collect()
    };
    assert_eq!(inputs[&features], expected);
    assert!(!inputs.keys().any(|k| k.ends_with("run_manifest.json")));
    let lines = fs::read_to_string(cond.join("metrics.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["k", "t", "loss_gm", "r_struct", "conflict_rate", "dirichlet_raw", "wall_ms"] {
        assert!(first.get(key).is_some(), "metrics row lacks {key}");
    }
}

#[test]
fn existing_output_needs_force() {
    let root = tempfile::tempdir().unwrap();
    let (data, _) = fixture(root.path());
    let data = data.to_string_lossy().into_owned();
    let again = mmgc(&["gen-synth", "--out", &data, "--nodes", "300"]);
    assert_eq!(code(&again), 2);
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let forced = mmgc(&["gen-synth", "--out", &data, "--nodes", "200", "--force"]);
    assert_eq!(code(&forced), 0);
    assert_eq!(read_json(Path::new(&data).join("meta.json"))["num_nodes"], 200);
}

#[test]
fn output_may_not_overwrite_an_input() {
    let root = tempfile::tempdir().unwrap();
    let (data, _) = fixture(root.path());
    let data = data.to_string_lossy().into_owned();
    let out = mmgc(&["baseline-random", "--data", &data, "--out", &data, "--force"]);
    assert_eq!(code(&out), 2);
    assert!(Path::new(&data).join("features.f64").exists());
}

#[test]
fn invalid_arguments_are_usage_errors() {
    let root = tempfile::tempdir().unwrap();
    let out = mmgc(&["gen-synth", "--out", &path(root.path(), "x"), "--conflict", "1.5"]);
    assert_eq!(code(&out), 2);
    let (data, _) = fixture(root.path());
    let data = data.to_string_lossy().into_owned();
    let out = mmgc(&["condense", "--data", &data, "--out", &path(root.path(), "c"), "--ratio", "1.5"]);
    assert_eq!(code(&out), 2);
    let out = mmgc(&["condense", "--data", &data, "--out", &path(root.path(), "c"), "--mode", "bogus"]);
    assert_eq!(code(&out), 2);
    let out = Command::new(env!("CARGO_BIN_EXE_mmgc"))
        .args(["gen-synth", "--out", &path(root.path(), "y")])
        .env("MMGC_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn single_run_eval_has_zero_spread() {
    let root = tempfile::tempdir().unwrap();
    let (data, cond) = fixture(root.path());
    let report = path(root.path(), "report");
    let out = mmgc(&[
        "eval",
        "--condensed",
        &cond.to_string_lossy(),
        "--data",
        &data.to_string_lossy(),
        "--out",
        &report,
        "--runs",
        "1",
        "--epochs",
        "20",
        "--hidden",
        "16",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(Path::new(&report).join("eval_report.json"));
    assert_eq!(r["std"], 0.0);
    assert_eq!(r["accuracies"].as_array().unwrap().len(), 1);
    let m = read_json(Path::new(&report).join("run_manifest.json"));
    assert_eq!(m["status"], "ok");
}

#[test]
fn mismatched_feature_width_is_incompatible() {
    let root = tempfile::tempdir().unwrap();
    let (_, cond) = fixture(root.path());
    let other = path(root.path(), "wide");
    assert_eq!(code(&mmgc(&["gen-synth", "--out", &other, "--nodes", "200", "--d-text", "4", "--d-image", "4"])), 0);
    let out = mmgc(&[
        "eval",
        "--condensed",
        &cond.to_string_lossy(),
        "--data",
        &other,
        "--out",
        &path(root.path(), "r"),
        "--epochs",
        "5",
    ]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn divergence_exits_with_numerical_code_and_keeps_metrics() {
    let root = tempfile::tempdir().unwrap();
    let (data, _) = fixture(root.path());
    let cond = path(root.path(), "boom");
    let out = mmgc(&[
        "condense",
        "--data",
        &data.to_string_lossy(),
        "--out",
        &cond,
        "--ratio",
        "0.05",
        "--outer",
        "2",
        "--inner",
        "5",
        "--hidden",
        "16",
        "--lr-feat",
        "1e300",
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged at outer"));
    let m = read_json(Path::new(&cond).join("run_manifest.json"));
    assert_eq!(m["status"], "diverged");
    assert!(Path::new(&cond).join("metrics.jsonl").exists());
}

#[test]
fn coreset_baseline_is_a_condensed_directory() {
    let root = tempfile::tempdir().unwrap();
    let (data, _) = fixture(root.path());
    let out_dir = path(root.path(), "random");
    let out = mmgc(&["baseline-random", "--data", &data.to_string_lossy(), "--out", &out_dir, "--ratio", "0.05"]);
    assert_eq!(code(&out), 0);
    let meta = read_json(Path::new(&out_dir).join("meta.json"));
    assert_eq!(meta["kind"], "condensed");
    assert_eq!(meta["num_nodes"], 9);
}

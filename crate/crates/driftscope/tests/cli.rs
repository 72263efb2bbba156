//! Black-box CLI tests: argument validation, exit codes, directory
//! locking, and overwrite protection. All training here uses a miniature
//! model so the whole file runs in seconds.

use std::path::Path;
use std::process::{Command, Output};

fn driftscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftscope"))
        .args(args)
        .output()
        .expect("spawn driftscope")
}

fn tiny_train_args<'a>(out: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "train", "--out", out, "--steps", "20", "--ckpt-every", "10", "--seed", "3",
        "--layers", "1", "--d-model", "16", "--heads", "2", "--d-ff", "32", "--vocab", "64",
        "--seq-len", "32", "--batch-size", "2",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = driftscope(&["train"]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("--out"), "stderr should name the missing flag: {stderr}");
}

#[test]
fn unknown_optimizer_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = dir.path().join("run").to_str().unwrap().to_string();
    let out = driftscope(&tiny_train_args(&out_s, &["--optimizer", "adagrad"]));
    assert!(!out.status.success());
}

#[test]
fn momentum_with_adamw_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out_s = dir.path().join("run").to_str().unwrap().to_string();
    let out = driftscope(&tiny_train_args(&out_s, &["--momentum", "0.9"]));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("momentum"), "stderr should explain the conflict: {stderr}");
}

#[test]
fn train_produces_expected_outputs_and_exit_zero() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    let out = driftscope(&tiny_train_args(&out_s, &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "eval.csv", "manifest.json", "ckpt_0.dsck", "ckpt_20.dsck"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    assert!(!run.join(".lock").exists(), "lock should be released");
}

#[test]
fn non_empty_out_dir_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    assert!(driftscope(&tiny_train_args(&out_s, &[])).status.success());
    let again = driftscope(&tiny_train_args(&out_s, &[]));
    assert!(!again.status.success(), "rerun without --force must fail");
    let forced = driftscope(&tiny_train_args(&out_s, &["--force"]));
    assert!(forced.status.success(), "{}", String::from_utf8_lossy(&forced.stderr));
}

#[test]
fn locked_run_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    std::fs::create_dir_all(&run).unwrap();
    std::fs::write(run.join(".lock"), b"").unwrap();
    let out_s = run.to_str().unwrap().to_string();
    let out = driftscope(&tiny_train_args(&out_s, &["--force"]));
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("lock"), "stderr should mention the lock: {stderr}");
}

#[test]
fn rayleigh_rejects_zero_k() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    assert!(driftscope(&tiny_train_args(&out_s, &[])).status.success());
    let dvec = dir.path().join("bb.dvec");
    let dvec_s = dvec.to_str().unwrap().to_string();
    let pca_s = dir.path().join("pca.json").to_str().unwrap().to_string();
    assert!(driftscope(&[
        "analyze", "pca", "--run", &out_s, "--anchor", "0", "--top-k", "1", "--save-backbone",
        &dvec_s, "--out", &pca_s,
    ])
    .status
    .success());
    let out = driftscope(&[
        "rayleigh", "--run", &out_s, "--dir", &dvec_s, "--k", "0", "--m", "2",
        "--out", dir.path().join("ray.csv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn analyze_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    assert!(driftscope(&tiny_train_args(&out_s, &[])).status.success());
    let pca_s = dir.path().join("pca.json").to_str().unwrap().to_string();
    let args = ["analyze", "pca", "--run", &out_s, "--anchor", "0", "--out", &pca_s];
    assert!(driftscope(&args).status.success());
    let again = driftscope(&args);
    assert!(!again.status.success(), "existing report without --force must fail");
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    assert!(driftscope(&forced).status.success());
}

#[test]
fn bad_window_flag_is_a_usage_error() {
    let out = driftscope(&[
        "analyze", "pca", "--run", "/nonexistent", "--anchor", "0", "--window", "90,10",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("window"), "stderr should explain the bad window: {stderr}");
}

#[test]
fn manifest_records_checkpoints_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    assert!(driftscope(&tiny_train_args(&out_s, &[])).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap())
            .unwrap();
    let ckpts = manifest["checkpoints"].as_array().unwrap();
    assert_eq!(ckpts.len(), 3, "steps 0, 10, 20");
    assert_eq!(ckpts[0], "ckpt_0.dsck");
    assert!(manifest["config_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn reheat_requires_existing_checkpoint() {
    let out = driftscope(&[
        "reheat", "--from", "/nonexistent/ckpt_0.dsck", "--lrs", "1e-3", "--steps", "10",
    ]);
    assert!(!out.status.success());
}

fn read_csv_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.to_string())
        .collect()
}

#[test]
fn reheat_writes_one_series_per_lr() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let out_s = run.to_str().unwrap().to_string();
    assert!(driftscope(&tiny_train_args(&out_s, &[])).status.success());
    let rh_out = dir.path().join("reheat");
    let out = driftscope(&[
        "reheat", "--from", run.join("ckpt_20.dsck").to_str().unwrap(), "--run", &out_s,
        "--lrs", "1e-3,0", "--lambda", "4.0", "--steps", "10", "--eval-every", "5",
        "--out", rh_out.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for sub in ["lr_1e-3", "lr_0e0"] {
        let rows = read_csv_rows(&rh_out.join(sub).join("eval.csv"));
        assert!(rows.len() >= 3, "{sub} should have header plus evals");
    }
    assert!(rh_out.join("reheat.json").exists());
}

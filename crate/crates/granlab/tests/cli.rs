use std::path::Path;
use std::process::{Command, Output};

use granlab::output::SWEEP_COLUMNS;

fn granlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_granlab")).args(args).env("GRANLAB_THREADS", "1").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn construct(dir: &Path, activation: &str, seed: &str) -> Output {
    granlab(&[
        "construct", "--activation", activation, "--m", "8", "--k", "2", "--d", "64", "--seed", seed, "--n", "20000",
        "--output-dir", s(dir),
    ])
}

#[test]
fn construct_writes_checkpoint_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = construct(dir.path(), "constant", "3");
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stem = "construct-constant-m8-k2-w1-d64-seed3";
    let (layer, header) = granlab::checkpoint::read_checkpoint(&dir.path().join(format!("{stem}.ckpt"))).unwrap();
    assert_eq!(layer.config.m, 8);
    assert_eq!(header.provenance.seed, Some(3));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(report["kind"], "construction");
    assert_eq!(report["pass"], true);
}

#[test]
fn missing_required_field_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = granlab(&["construct", "--activation", "relu", "--m", "8", "--d", "64", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("moe.k"));
}

#[test]
fn unknown_lemma_and_bad_flags_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&granlab(&["verify", "--lemma", "no-such-lemma", "--output-dir", s(dir.path())])), 2);
    assert_eq!(code(&granlab(&["verify", "--bogus-flag"])), 2);
    assert_eq!(code(&granlab(&["construct", "--activation", "cubic"])), 2);
    assert_eq!(code(&granlab(&["verify", "--lemma", "chi2-tail", "--param", "x"])), 2);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"moe": {"m": 8, "k": 2, "d": 16, "activation": "relu", "typo": 1}}"#).unwrap();
    let out = granlab(&["construct", "--config", s(&cfg), "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 2);
    std::fs::write(&cfg, r#"{"command": "train"}"#).unwrap();
    assert_eq!(code(&granlab(&["verify", "--config", s(&cfg), "--lemma", "chi2-tail"])), 2);
}

#[test]
fn verify_passes_and_writes_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let out = granlab(&[
        "verify", "--lemma", "chi2-tail", "--d", "10", "--x", "1", "--n", "20000", "--seed", "1", "--seeds", "3",
        "--output-dir", s(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("verify-chi2-tail.json")).unwrap()).unwrap();
    assert_eq!(v["seeds"], serde_json::json!([1, 2, 3]));
    assert_eq!(v["result"]["reports"].as_array().unwrap().len(), 3);
}

#[test]
fn certify_requires_both_paths() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&granlab(&["certify", "--output-dir", s(dir.path())])), 2);
    let missing = dir.path().join("absent.ckpt");
    assert_eq!(code(&granlab(&["certify", "--f", s(&missing), "--f-prime", s(&missing)])), 2);
}

#[test]
fn self_certificate_is_sound_with_zero_bound() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&construct(dir.path(), "constant", "0")), 0);
    let ckpt = dir.path().join("construct-constant-m8-k2-w1-d64-seed0.ckpt");
    let out = granlab(&["certify", "--f", s(&ckpt), "--f-prime", s(&ckpt), "--n", "20000", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("certificate.json")).unwrap()).unwrap();
    assert_eq!(v["result"]["bound"], 0.0);
    assert_eq!(v["result"]["sound"], true);
}

#[test]
fn certify_rejects_non_constant_layers() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&construct(dir.path(), "linear", "0")), 0);
    let ckpt = dir.path().join("construct-linear-m8-k2-w1-d64-seed0.ckpt");
    assert_eq!(code(&granlab(&["certify", "--f", s(&ckpt), "--f-prime", s(&ckpt), "--output-dir", s(dir.path())])), 2);
}

#[test]
fn report_on_empty_and_corrupt_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let out = granlab(&["report", s(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| file | kind | pass |"));
    std::fs::write(dir.path().join("good.json"), r#"{"kind": "verify", "pass": false}"#).unwrap();
    std::fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    let sum = dir.path().join("sum");
    let out = granlab(&["report", s(dir.path()), "--output-dir", s(&sum)]);
    assert_eq!(code(&out), 1);
    let md = std::fs::read_to_string(sum.join("summary.md")).unwrap();
    assert!(md.contains("| good.json | verify | no |"));
    assert!(md.contains("bad.json"));
    assert_eq!(code(&granlab(&["report", s(&dir.path().join("absent"))])), 2);
}

#[test]
fn empty_sweep_grid_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = granlab(&["sweep", "--d", "8", "--teacher-m", "4", "--teacher-k", "2", "--granularities", "", "--output-dir", s(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.trim_end(), SWEEP_COLUMNS.join(","));
}

#[test]
fn tiny_train_and_sweep_run() {
    let dir = tempfile::tempdir().unwrap();
    let common = [
        "--d", "8", "--teacher-m", "4", "--teacher-k", "2", "--samples", "2048", "--batch-size", "256",
        "--eval-samples", "256", "--eval-every", "2",
    ];
    let mut args = vec!["train", "--k", "2", "--m", "4", "--lr", "0.5", "--output-dir", s(dir.path())];
    args.extend(common);
    let out = granlab(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let log = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
    assert!(log.starts_with("step,lr,train_loss,eval_loss"));
    assert!(dir.path().join("student.ckpt").exists());

    let mut args = vec!["sweep", "--granularities", "1,2", "--active", "10", "--total", "20", "--lrs", "0.5,0.1"];
    args.extend(common);
    args.extend(["--output-dir", s(dir.path())]);
    let out = granlab(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let again = dir.path().join("again");
    let idx = args.len() - 1;
    args[idx] = s(&again);
    assert_eq!(code(&granlab(&args)), 0);
    assert_eq!(std::fs::read_to_string(again.join("sweep.csv")).unwrap(), csv);
}

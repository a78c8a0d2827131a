use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn ksat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ksat"))
        .current_dir(dir)
        .args(args)
        .arg("--quiet")
        .output()
        .expect("spawn ksat")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ksat(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(text.trim()).unwrap_or_else(|_| panic!("not a JSON error line: {text}"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_balances_outcomes() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "4", "--out", "c.jsonl", "--seed", "2"]);
    let text = fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let mut golds: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["gold"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(golds.len(), 4);
    golds.sort();
    golds.dedup();
    assert_eq!(golds.len(), 4);
}

#[test]
fn out_of_range_threshold_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "4", "--out", "c.jsonl"]);
    let out = ksat(dir.path(), &["annotate", "--data", "c.jsonl", "--out", "a.jsonl", "--thetas", "1.5,0,0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn missing_input_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksat(dir.path(), &["annotate", "--data", "nope.jsonl", "--out", "a.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"], "data");
}

#[test]
fn malformed_corpus_is_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": 3}\n").unwrap();
    let out = ksat(dir.path(), &["annotate", "--data", "bad.jsonl", "--out", "a.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_subcommand_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksat(dir.path(), &["fly"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"], "usage");
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ksat(dir.path(), &["--help"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("gradcheck"));
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(dir.path(), &["gradcheck", "--posts", "2", "--dim", "8", "--seed", "4"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(!report["blocks"].as_array().unwrap().is_empty());
}

fn pipeline(dir: &Path) {
    ok(dir, &["synth", "--n", "24", "--out", "c.jsonl", "--seed", "9"]);
    ok(dir, &["annotate", "--data", "c.jsonl", "--out", "a.jsonl"]);
    ok(
        dir,
        &[
            "train", "--data", "a.jsonl", "--out", "m.json", "--epochs", "5", "--dim", "16", "--seed", "9",
            "--test-fraction", "0.25",
        ],
    );
    ok(dir, &["eval", "--data", "a.jsonl", "--model", "m.json", "--out", "e.json"]);
    ok(dir, &["eval", "--data", "a.jsonl", "--model", "m.json", "--out", "e0.json", "--no-kg-bias"]);
    ok(dir, &["report", "--data", "a.jsonl", "--model", "m.json", "--out-dir", "rep"]);
}

const OUTPUTS: &[&str] = &[
    "c.jsonl",
    "a.jsonl",
    "m.json",
    "m.run.json",
    "e.json",
    "e0.json",
    "rep/contributions.csv",
    "rep/distances.csv",
    "rep/report.json",
];

#[test]
fn full_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    pipeline(dir.path());
    for name in OUTPUTS {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }

    let run = read_json(&dir.path().join("m.run.json"));
    assert_eq!(run["loss_trace"].as_array().unwrap().len(), 5);
    // 6 posts per class; the stratified split holds out one of each.
    assert_eq!(run["config"]["test_posts"], 4);
    assert_eq!(run["config"]["train_posts"], 20);
    assert_eq!(run["config"]["dimension"], 16);

    let eval = read_json(&dir.path().join("e.json"));
    assert_eq!(eval["n"], 24);
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let confusion = eval["confusion"].as_array().unwrap();
    let total: u64 = confusion
        .iter()
        .flat_map(|r| r.as_array().unwrap())
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(total, 24);

    let distances = fs::read_to_string(dir.path().join("rep/distances.csv")).unwrap();
    assert_eq!(distances.lines().count(), 1 + 24 * 23 / 2);
    let contributions = fs::read_to_string(dir.path().join("rep/contributions.csv")).unwrap();
    assert_eq!(contributions.lines().count(), 1 + 4);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    for name in OUTPUTS {
        let x = fs::read(a.path().join(name)).unwrap();
        let y = fs::read(b.path().join(name)).unwrap();
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn dimension_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--n", "8", "--out", "c.jsonl"]);
    ok(dir.path(), &["annotate", "--data", "c.jsonl", "--out", "a.jsonl"]);
    ok(dir.path(), &["train", "--data", "a.jsonl", "--out", "m.json", "--epochs", "1", "--dim", "8"]);
    let out = ksat(dir.path(), &["eval", "--data", "a.jsonl", "--model", "m.json", "--out", "e.json", "--dim", "16"]);
    assert!(!out.status.success());
}

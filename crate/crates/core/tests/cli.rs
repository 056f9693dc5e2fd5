use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn stmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stmoe")).args(args).output().expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn generate(dir: &Path) {
    let out = stmoe(&["generate", "--out-dir", p(dir), "--nodes", "4", "--steps", "700", "--seed", "3"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}

fn train(dir: &Path) -> Output {
    let ckp = dir.join("model.ckpt");
    let history = dir.join("history.jsonl");
    stmoe(&[
        "train",
        "--readings",
        p(&dir.join("readings.csv")),
        "--edges",
        p(&dir.join("edges.csv")),
        "--set",
        "experts=Id+Ad",
        "--set",
        "d_model=8",
        "--set",
        "max_epochs=1",
        "--set",
        "train_stride=8",
        "--checkpoint",
        p(&ckp),
        "--history",
        p(&history),
    ])
}

#[test]
fn generate_writes_three_files() {
    let dir = TempDir::new().unwrap();
    generate(dir.path());
    for name in ["readings.csv", "edges.csv", "regimes.csv"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let regimes = std::fs::read_to_string(dir.path().join("regimes.csv")).unwrap();
    assert_eq!(regimes.lines().count(), 701);
}

#[test]
fn train_eval_inspect_round() {
    let dir = TempDir::new().unwrap();
    generate(dir.path());
    let out = train(dir.path());
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("best epoch 1"));
    let history = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 1);

    let ckp = dir.path().join("model.ckpt");
    let readings = dir.path().join("readings.csv");
    let out = stmoe(&["eval", "--checkpoint", p(&ckp), "--readings", p(&readings), "--baseline"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["model"]["mae"].as_f64().unwrap() > 0.0);
    assert!(report["persistence"]["mae"].as_f64().unwrap() > 0.0);

    let out = stmoe(&["inspect", "--checkpoint", p(&ckp), "--readings", p(&readings), "--windows", "8"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let shown = text(&out.stdout);
    assert!(shown.contains("experts: Id+Ad") && shown.contains("routing over 8"), "{shown}");
}

#[test]
fn predictions_scored_against_truth() {
    let dir = TempDir::new().unwrap();
    generate(dir.path());
    let readings = dir.path().join("readings.csv");
    let out = stmoe(&["eval", "--predictions", p(&readings), "--truth", p(&readings)]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["mae"].as_f64(), Some(0.0));
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(stmoe(&["train"]).status.code(), Some(1));
    assert_eq!(stmoe(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(stmoe(&["--help"]).status.code(), Some(0));

    let dir = TempDir::new().unwrap();
    generate(dir.path());
    let out = stmoe(&[
        "train",
        "--readings",
        p(&dir.path().join("readings.csv")),
        "--edges",
        p(&dir.path().join("edges.csv")),
        "--set",
        "learning_rate=0.1",
        "--checkpoint",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("valid keys"));
}

#[test]
fn bad_input_exits_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(stmoe(&["inspect", "--checkpoint", p(&missing)]).status.code(), Some(2));

    generate(dir.path());
    assert!(train(dir.path()).status.success());
    let ckp = dir.path().join("model.ckpt");
    let mut bytes = std::fs::read(&ckp).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&ckp, bytes).unwrap();
    let out = stmoe(&["inspect", "--checkpoint", p(&ckp)]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = dir.path().join("garbage.csv");
    std::fs::write(&garbage, "timestamp,a\nnot-a-time,1\n").unwrap();
    let out = stmoe(&["eval", "--predictions", p(&garbage), "--truth", p(&garbage)]);
    assert_eq!(out.status.code(), Some(2));
}

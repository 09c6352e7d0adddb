use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cpi-lab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr)
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn collect_writes_header_and_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["collect", "--preset", "inferior", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let body = fs::read_to_string(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(body.lines().count(), 10_001);
}

#[test]
fn collect_csv_flag_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "collect", "--behavior", "random", "--n", "50", "--csv", "--out", path(dir.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let csv = fs::read_to_string(dir.path().join("dataset.csv")).unwrap();
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&cli(&[])), 2);
    assert_eq!(code(&cli(&["--bogus", "collect"])), 2);
    assert_eq!(code(&cli(&["collect", "--behavior", "nonsense"])), 2);
    let out = cli(&["run"]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("--config"));
    assert_eq!(code(&cli(&["run", "--preset", "no-such-preset"])), 2);
}

#[test]
fn empty_tau_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"env": "grid7x7", "dataset": "inferior", "algorithms": ["cpi"],
            "taus": [], "iterations": 5, "seeds": [0]}"#,
    )
    .unwrap();
    let out = cli(&["run", "--config", path(&spec), "--out", path(dir.path())]);
    assert_eq!(code(&out), 2);
    assert!(text(&out).contains("tau grid is empty"));
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"env": "grid7x7", "dataset": "inferior", "algorithms": ["cpi", "br", "cpi-re"],
            "taus": [0.5, 2.0], "iterations": 20, "seeds": [0, 1], "noise": "bootstrap"}"#,
    )
    .unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let first = cli(&["run", "--config", path(&spec), "--out", path(&a), "--jobs", "1"]);
    assert_eq!(code(&first), 0, "{}", text(&first));
    let second = cli(&["run", "--config", path(&spec), "--out", path(&b), "--jobs", "3"]);
    assert_eq!(code(&second), 0, "{}", text(&second));
    let mut compared = 0;
    for entry in walk(&a).into_iter().filter(|p| !p.ends_with("timing.log")) {
        let rel = entry.strip_prefix(&a).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.join(rel)).unwrap(), "{}", rel.display());
        compared += 1;
    }
    assert!(compared >= 12 + 1, "only {compared} files");
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            files.extend(walk(&p));
        } else {
            files.push(p);
        }
    }
    files.sort();
    files
}

#[test]
fn quick_check_passes_and_sign_flip_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ok = cli(&["check", "--quick", "--out", path(dir.path())]);
    assert_eq!(code(&ok), 0, "{}", text(&ok));
    assert!(dir.path().join("check.json").is_file());
    let bad = cli(&["check", "--quick", "--inject-sign-flip", "--out", path(dir.path())]);
    assert_eq!(code(&bad), 1, "{}", text(&bad));
    assert!(text(&bad).contains("FAIL"));
}

#[test]
fn zero_trials_pass_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("check.json");
    fs::write(&config, r#"{"improvement_trials": 0, "bound_trials": 0, "softmax_trials": 0}"#).unwrap();
    let out = cli(&["check", "--config", path(&config), "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(text(&out).contains("vacuous pass"));
}

#[test]
fn oracle_reports_known_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["oracle", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(text(&out).contains("24.519166"));
    let out = cli(&["oracle", "--env", "fourroom", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0);
    assert!(text(&out).contains("greedy return 81"));
}

#[test]
fn oracle_strict_rejects_dangling_support() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("tiny.jsonl");
    let out = cli(&[
        "collect", "--behavior", "random", "--n", "3", "--seed", "2", "--output", path(&ds),
    ]);
    assert_eq!(code(&out), 0);
    let lenient = cli(&["oracle", "--dataset", path(&ds), "--out", path(dir.path())]);
    assert_eq!(code(&lenient), 0, "{}", text(&lenient));
    let strict = cli(&["oracle", "--dataset", path(&ds), "--strict", "--out", path(dir.path())]);
    assert_eq!(code(&strict), 1);
    assert!(text(&strict).contains("degenerate support"));
}

#[test]
fn oracle_with_expert_data_covers_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("expert.jsonl");
    assert_eq!(code(&cli(&["collect", "--preset", "expert", "--output", path(&ds)])), 0);
    let out = cli(&["oracle", "--dataset", path(&ds), "--strict", "--out", path(dir.path())]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    assert!(text(&out).contains("optimal path covered: true"));
}

#[test]
fn missing_dataset_file_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"env": "grid7x7", "dataset": {"file": "/nonexistent/data.jsonl"},
            "algorithms": ["cpi"], "taus": [1.0], "iterations": 5, "seeds": [0]}"#,
    )
    .unwrap();
    assert_eq!(code(&cli(&["run", "--config", path(&spec), "--out", path(dir.path())])), 2);
}

mod common;

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use common::fixture;
use tempfile::TempDir;

fn semmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semmem"))
        .args(args)
        .env("SEMMEM_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_both(dir: &Path, scenario: &str) {
    let input = fixture(scenario);
    let out = semmem(&["train-spatial", path(&input), "--out", path(dir)]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let out = semmem(&[
        "train-temporal",
        path(&input),
        "--spatial",
        path(dir),
        "--out",
        path(dir),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().is_file())
        .map(|e| {
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn every_subcommand_is_byte_identical_across_runs() {
    let runs: Vec<(TempDir, Vec<u8>, Vec<u8>)> = (0..2)
        .map(|_| {
            let dir = TempDir::new().unwrap();
            train_both(dir.path(), "scenario2.json");
            let predict_dir = dir.path().join("predict");
            let predicted = semmem(&[
                "predict",
                path(&fixture("scenario2.json")),
                "--artifacts",
                path(dir.path()),
                "--out",
                path(&predict_dir),
            ]);
            assert!(predicted.status.success());
            let eval_dir = dir.path().join("eval");
            let evaluated = semmem(&[
                "eval",
                path(&fixture("scenario1.json")),
                path(&fixture("scenario2.json")),
                "--out",
                path(&eval_dir),
            ]);
            assert!(evaluated.status.success());
            (dir, predicted.stdout, evaluated.stdout)
        })
        .collect();
    let (a, b) = (&runs[0], &runs[1]);
    for sub in ["", "predict", "eval"] {
        let fa = files(&a.0.path().join(sub));
        let fb = files(&b.0.path().join(sub));
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "artifacts in {sub:?} differ");
    }
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
}

#[test]
fn predict_stdout_matches_written_reports() {
    let dir = TempDir::new().unwrap();
    train_both(dir.path(), "scenario2.json");
    let out = semmem(&[
        "predict",
        path(&fixture("scenario2.json")),
        "--artifacts",
        path(dir.path()),
        "--out",
        path(dir.path()),
    ]);
    assert!(out.status.success());
    assert_eq!(
        out.stdout,
        fs::read(dir.path().join("step_reports.jsonl")).unwrap()
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let new_events = text
        .lines()
        .filter(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["new_event"] == true)
        .count();
    assert_eq!(new_events, 2);
}

#[test]
fn predict_reads_a_stream_from_stdin() {
    let dir = TempDir::new().unwrap();
    train_both(dir.path(), "scenario1.json");
    let mut child = Command::new(env!("CARGO_BIN_EXE_semmem"))
        .args(["predict", "-", "--artifacts", path(dir.path())])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(
            b"{\"episode\":\"live\",\"index\":0,\"observations\":[{\"code\":1,\"dy\":0,\"dx\":0},{\"code\":5,\"dy\":8,\"dx\":3.5},{\"code\":6,\"dy\":40,\"dx\":-3.5}]}\n",
        )
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["episode"], "live");
    assert_eq!(report["label"], "E1");
    assert_eq!(report["predictions"][0]["source"], "episodic");
    assert_eq!(report["predictions"][1]["source"], "pcfg");
}

#[test]
fn missing_artifacts_are_a_dependency_error() {
    let dir = TempDir::new().unwrap();
    let out = semmem(&[
        "train-temporal",
        path(&fixture("scenario1.json")),
        "--spatial",
        path(dir.path()),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("spatial_grammar.json"));
    let out = semmem(&[
        "predict",
        path(&fixture("scenario1.json")),
        "--artifacts",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    // usage error
    assert_eq!(semmem(&["train-spatial"]).status.code(), Some(1));
    assert_eq!(semmem(&["frobnicate"]).status.code(), Some(1));
    // missing input file
    let out = semmem(&[
        "train-spatial",
        "/no/such/file.json",
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    // validation error: an episode with zero steps
    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"{"id":"bad","vocabulary":[{"code":1,"kind":"self-state","description":"forward"}],
            "lane_groups":[],"episodes":[{"id":"e","steps":[]}]}"#,
    )
    .unwrap();
    let out = semmem(&["train-spatial", path(&bad), "--out", path(dir.path())]);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // bad config value
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"lambda": -1}"#).unwrap();
    let out = semmem(&[
        "train-spatial",
        path(&fixture("scenario1.json")),
        "--config",
        path(&cfg),
        "--out",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lambda"));
}

#[test]
fn version_mismatch_fails_at_load() {
    let dir = TempDir::new().unwrap();
    train_both(dir.path(), "scenario1.json");
    let grammar = dir.path().join("spatial_grammar.json");
    let text = fs::read_to_string(&grammar)
        .unwrap()
        .replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(&grammar, text).unwrap();
    let out = semmem(&[
        "predict",
        path(&fixture("scenario1.json")),
        "--artifacts",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("99"));
}

#[test]
fn seed_override_changes_the_grammar() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let input = fixture("scenario1.json");
    assert!(
        semmem(&["train-spatial", path(&input), "--out", path(a.path())])
            .status
            .success()
    );
    assert!(semmem(&[
        "train-spatial",
        path(&input),
        "--seed",
        "7",
        "--out",
        path(b.path())
    ])
    .status
    .success());
    let ga = fs::read(a.path().join("spatial_grammar.json")).unwrap();
    let gb = fs::read(b.path().join("spatial_grammar.json")).unwrap();
    assert_ne!(ga, gb);
}

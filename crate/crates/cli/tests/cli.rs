use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn demo(file: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../demo").join(file)
}

fn nl2sql(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nl2sql")).args(args).env_remove("RUST_LOG").output().expect("run nl2sql")
}

fn replay_args<'a>(config: &'a str, transcript: &'a str) -> Vec<&'a str> {
    vec!["--config", config, "--replay", transcript]
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = nl2sql(&[flag]);
        assert_eq!(out.status.code(), Some(0), "{flag}");
        assert!(!out.stdout.is_empty());
    }
}

#[test]
fn unknown_or_missing_subcommand_prints_help_and_exits_one() {
    for args in [&["frobnicate"][..], &[][..]] {
        let out = nl2sql(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = text(&out.stderr);
        assert!(err.contains("Commands:") && err.contains("eval"), "{err}");
    }
}

#[test]
fn record_and_replay_conflict() {
    let out = nl2sql(&["--record", "a.jsonl", "--replay", "b.jsonl", "catalog", "x.sqlite"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("cannot be used with"));
}

#[test]
fn catalog_prints_both_renderings() {
    let db = demo("traffic.sqlite");
    let out = nl2sql(&["catalog", db.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("Table districts, Columns=[district_id, name"));
    assert!(stdout
        .contains("  - record_time: ValueType=TEXT; Meaning=local time of the measurement; Sample=2023/10/09 07:00"));
}

#[test]
fn eval_replays_the_demo_and_writes_a_stable_report() {
    let dir = tempfile::tempdir().unwrap();
    let (config, transcript, dataset) = (demo("demo_config.json"), demo("demo_transcript.jsonl"), demo("demo.jsonl"));
    let mut reports = Vec::new();
    for i in 0..2 {
        let report = dir.path().join(format!("report{i}.json"));
        let mut args = replay_args(config.to_str().unwrap(), transcript.to_str().unwrap());
        args.extend(["eval", dataset.to_str().unwrap(), "--strict", "--report", report.to_str().unwrap()]);
        let out = nl2sql(&args);
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
        assert!(text(&out.stdout).contains("overall        12       12   1.0000"), "{}", text(&out.stdout));
        reports.push(std::fs::read(report).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn strict_eval_with_mismatches_exits_two() {
    let (config, transcript, dataset) =
        (demo("demo_config.json"), demo("demo_function_transcript.jsonl"), demo("demo.jsonl"));
    let mut args = replay_args(config.to_str().unwrap(), transcript.to_str().unwrap());
    args.extend(["--backend", "function", "eval", dataset.to_str().unwrap(), "--strict", "--sequential"]);
    let out = nl2sql(&args);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("overall        12        9   0.7500"));
}

#[test]
fn ask_answers_from_the_transcript() {
    let (config, transcript, db) = (demo("demo_config.json"), demo("demo_transcript.jsonl"), demo("traffic.sqlite"));
    let mut args = replay_args(config.to_str().unwrap(), transcript.to_str().unwrap());
    args.extend(["ask", db.to_str().unwrap(), "What is the speed on Ring Road as of now?"]);
    let out = nl2sql(&args);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.starts_with("Rewritten: What is the speed on Ring Road as of 2023-10-10 08:00?\n"));
    assert!(stdout.ends_with("speed\n-----\n40.3\n"), "{stdout:?}");

    args.push("--json");
    let out = nl2sql(&args);
    let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(record["final"]["outcome"]["status"], "success");
}

#[test]
fn replay_miss_exits_one_and_names_the_digest() {
    let (config, transcript, db) = (demo("demo_config.json"), demo("demo_transcript.jsonl"), demo("traffic.sqlite"));
    let mut args = replay_args(config.to_str().unwrap(), transcript.to_str().unwrap());
    args.extend(["ask", db.to_str().unwrap(), "Which road is the longest?"]);
    let out = nl2sql(&args);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    let digest = err.trim().rsplit(' ').next().unwrap();
    assert!(err.contains("replay miss"), "{err}");
    assert_eq!(digest.len(), 64, "{err}");
    assert!(digest.chars().all(|c| c.is_ascii_hexdigit()));
}

mod common;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use trapline::cli::run_with;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn run_in(root: &Path, args: &[&str]) -> Run {
    let root = root.to_string_lossy().to_string();
    let mut argv: Vec<String> = vec!["trapline".into()];
    argv.extend(args.iter().map(|a| a.to_string()));
    argv.extend(["--catalog".into(), format!("{root}/catalog"), "--dest".into(), format!("{root}/sessions")]);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(&argv, &BTreeMap::new(), &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

#[test]
fn ingest_creates_the_session_folder() {
    let dir = tempfile::tempdir().unwrap();
    let card = dir.path().join("card");
    common::write_card(&card, 5);
    let card = card.to_string_lossy().to_string();
    let r = run_in(dir.path(), &["ingest", "--source", &card, "--site", "S01", "--date", "2024-05-03"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(dir.path().join("sessions/3May2024/S01").is_dir());
    let again = run_in(dir.path(), &["--json", "ingest", "--source", &card, "--site", "S01", "--date", "2024-05-03"]);
    let v: Value = serde_json::from_str(&again.out).unwrap();
    assert_eq!(v["duplicates_skipped"], 5);
    assert_eq!(v["files_copied"], 0);
}

#[test]
fn events_on_an_empty_catalog() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["events", "--gap", "10"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r.out.trim(), "0 events");
}

#[test]
fn unknown_adapter_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["detect", "--adapter", "nonexistent"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("adapter not found"), "{}", r.err);
}

#[test]
fn json_errors_are_machine_readable() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["--json", "detect", "--adapter", "nonexistent"]);
    let v: Value = serde_json::from_str(&r.out).unwrap();
    assert_eq!(v["exit_code"], 1);
    assert!(v["error"].as_str().unwrap().contains("adapter not found"));
}

#[test]
fn stats_json_parses() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["--json", "stats"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let v: Value = serde_json::from_str(&r.out).unwrap();
    assert!(v.is_object());
}

#[test]
fn effective_config_goes_to_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let r = run_in(dir.path(), &["--threshold", "0.35", "stats"]);
    assert!(r.err.contains("effective config:"));
    assert!(r.err.contains("threshold=0.35"), "{}", r.err);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run_in(dir.path(), &["frobnicate"]).code, 2);
    assert_eq!(run_in(dir.path(), &["--threshold", "2", "stats"]).code, 2);
    assert_eq!(run_in(dir.path(), &["ingest", "--site", "S01"]).code, 2);
}

#[test]
fn config_file_is_read_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("custom.conf");
    std::fs::write(&conf, "# comment\nthreshold = 0.4\n").unwrap();
    let conf_arg = conf.to_string_lossy().to_string();
    let r = run_in(dir.path(), &["--config", &conf_arg, "stats"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.err.contains("threshold=0.4"), "{}", r.err);

    std::fs::write(&conf, "bogus_key = 1\n").unwrap();
    assert_eq!(run_in(dir.path(), &["--config", &conf_arg, "stats"]).code, 2);
    let missing = dir.path().join("nope.conf").to_string_lossy().to_string();
    assert_eq!(run_in(dir.path(), &["--config", &missing, "stats"]).code, 2);
}

#[test]
fn binary_reports_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_trapline");
    let dir = tempfile::tempdir().unwrap();
    let status = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .env_clear()
            .stderr(std::process::Stdio::null())
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap()
            .code()
    };
    assert_eq!(status(&["frobnicate"]), Some(2));
    assert_eq!(status(&["--help"]), Some(0));
    assert_eq!(status(&["detect", "--adapter", "nonexistent"]), Some(1));
    assert_eq!(status(&["events", "--gap", "10"]), Some(0));
}

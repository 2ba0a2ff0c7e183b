//! Offline subcommands, run as a child process.

use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_humantool"))
}

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Fresh workdir holding copies of the fixtures.
fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    for entry in std::fs::read_dir(repo().join("fixtures")).unwrap() {
        let path = entry.unwrap().path();
        std::fs::copy(&path, dir.path().join(path.file_name().unwrap())).unwrap();
    }
    dir
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().arg("--workdir").arg(dir).args(args).output().unwrap()
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn check_golden(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(expected, actual, "golden {name}");
}

const START: &str = "2025-01-01T09:00:00Z";

fn run_fixture(dir: &Path, id: &str, plan: &str, responses: &str, extra: &[&str]) -> Output {
    let scenario = format!("{plan}.plan.json");
    let responses = format!("{responses}.responses.json");
    let mut args = vec![
        "--json", "run", "--profile", "ana.profile.json", "--scenario", &scenario, "--responses", &responses,
        "--session-id", id, "--start", START,
    ];
    args.extend_from_slice(extra);
    run_in(dir, &args)
}

#[test]
fn midpoint_profile_round_trips_through_validate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["profile", "init", "--human-id", "mid", "--answers", "3,3,3,3,3,3,3,3"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let profile: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("profile.json")).unwrap()).unwrap();
    for group in ["capabilities", "information", "authority"] {
        for (_, v) in profile[group].as_object().unwrap() {
            assert_eq!(v, 3);
        }
    }
    let out = run_in(dir.path(), &["profile", "validate", "profile.json"]);
    assert!(out.status.success());
}

#[test]
fn seven_answers_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["profile", "init", "--human-id", "x", "--answers", "3,3,3,3,3,3,3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("8 answers"));
    assert!(!dir.path().join("profile.json").exists());
}

#[test]
fn interactive_init_reads_answers_from_stdin() {
    let dir = tempfile::tempdir().unwrap();
    let mut child = bin()
        .arg("--workdir")
        .arg(dir.path())
        .args(["profile", "init", "--human-id", "ana", "--domain", "travel_planning", "--out", "ana.json"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    use std::io::Write;
    child.stdin.take().unwrap().write_all(b"1\n2\n3\n4\n5\n1\n2\n3\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let p: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("ana.json")).unwrap()).unwrap();
    // Option 1 is the strongest answer on reversed items.
    assert_eq!(p["capabilities"]["cognitive_creativity"], 5);
    assert_eq!(p["domain"], "travel_planning");
}

#[test]
fn out_of_range_profile_fails_validation() {
    let dir = tempfile::tempdir().unwrap();
    let mut p: Value = serde_json::from_str(&std::fs::read_to_string(repo().join("fixtures/ana.profile.json")).unwrap()).unwrap();
    p["authority"]["delegation_level"] = 9.into();
    std::fs::write(dir.path().join("bad.json"), p.to_string()).unwrap();
    let out = run_in(dir.path(), &["profile", "validate", "bad.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn golden_trip_run_succeeds_with_frozen_summary() {
    let dir = workdir();
    let out = run_fixture(dir.path(), "trip5", "trip5", "trip5", &[]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = stdout_json(&out);
    check_golden("trip5.summary.json", &(serde_json::to_string_pretty(&v["summary"]).unwrap() + "\n"));
    assert!(Path::new(v["log"].as_str().unwrap()).exists());
    assert!(Path::new(v["report"].as_str().unwrap()).exists());
}

#[test]
fn timed_out_payment_exits_one() {
    let dir = workdir();
    let out = run_fixture(dir.path(), "porto", "booking", "booking.silent", &[]);
    assert_eq!(out.status.code(), Some(1));
    let v = stdout_json(&out);
    assert_eq!(v["summary"]["failed_authority_nodes"], serde_json::json!(["confirm"]));
}

#[test]
fn ai_only_run_records_no_human_calls() {
    let dir = workdir();
    let out = run_fixture(dir.path(), "m", "all_ai", "booking", &["--mode", "ai-only"]);
    assert_eq!(out.status.code(), Some(0));
    let v = stdout_json(&out);
    assert_eq!(v["summary"]["calls_issued"], 0);
    assert!(v["summary"]["records"].as_array().unwrap().iter().all(|r| r["outcome"] == "ai_executed"));
}

#[test]
fn run_refuses_to_overwrite_a_log() {
    let dir = workdir();
    assert!(run_fixture(dir.path(), "same", "trip5", "trip5", &[]).status.success());
    assert_eq!(run_fixture(dir.path(), "same", "trip5", "trip5", &[]).status.code(), Some(2));
}

#[test]
fn missing_fixture_is_a_usage_error() {
    let dir = workdir();
    let out = run_fixture(dir.path(), "x", "nope", "trip5", &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.plan.json"));
}

#[test]
fn replay_matches_the_snapshot() {
    let dir = workdir();
    let run = stdout_json(&run_fixture(dir.path(), "trip5", "trip5", "trip5", &[]));
    let out = run_in(dir.path(), &["--json", "replay", "sessions/trip5/events.ndjson"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["state_hash"], run["summary"]["state_hash"]);
    assert_eq!(v["snapshot_matches"], true);
}

#[test]
fn report_over_no_logs_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["--json", "report"]);
    assert!(out.status.success());
    let v = stdout_json(&out);
    assert_eq!(v["totals"]["sessions"], 0);
    assert_eq!(v["totals"]["calls_issued"], 0);
}

#[test]
fn report_over_the_booking_log_matches_the_frozen_report() {
    let dir = workdir();
    run_fixture(dir.path(), "porto", "booking", "booking", &[]);
    let out = run_in(dir.path(), &["--json", "report", "sessions/porto/events.ndjson", "--out", "r.json"]);
    assert!(out.status.success());
    let golden: Value = serde_json::from_str(
        &std::fs::read_to_string(repo().join("crates/core/tests/golden/booking.report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(stdout_json(&out), golden);
    let text = run_in(dir.path(), &["report", "sessions/porto/events.ndjson"]);
    let golden_text = std::fs::read_to_string(repo().join("crates/core/tests/golden/booking.report.txt")).unwrap();
    assert_eq!(String::from_utf8_lossy(&text.stdout), golden_text);
}

#[test]
fn malformed_log_reports_file_and_line() {
    let dir = workdir();
    run_fixture(dir.path(), "porto", "booking", "booking", &[]);
    let path = dir.path().join("sessions/porto/events.ndjson");
    let mut lines: Vec<String> = std::fs::read_to_string(&path).unwrap().lines().map(String::from).collect();
    lines[2] = "{not json".into();
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let out = run_in(dir.path(), &["report", "sessions/porto/events.ndjson"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("events.ndjson") && err.contains("line 3"), "{err}");
}

#[test]
fn tables_export_writes_both_documents() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["tables", "export", "--out-dir", "tables"]);
    assert!(out.status.success());
    let b: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tables/behaviors.json")).unwrap()).unwrap();
    let t: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tables/transitions.json")).unwrap()).unwrap();
    assert_eq!(b, humantool_core::interaction::behavior_table_json());
    assert_eq!(t, humantool_core::interaction::transition_table_json());
    assert_eq!(b["stages"]["initial"], serde_json::json!(["prime", "configure"]));
}

#[test]
fn usage_errors_exit_two() {
    let out = bin().args(["run", "--mode", "both"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

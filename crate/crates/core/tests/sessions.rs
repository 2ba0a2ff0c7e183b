//! Fixture sessions end to end, directly and through the host.

mod common;

use std::sync::Arc;

use common::*;
use humantool_core::host::{Host, HostConfig};
use humantool_core::orchestrator::{Mode, RecordOutcome, ResponseScript, SessionConfig, SessionEvent};
use humantool_core::planner::ScriptedPlanner;
use humantool_core::protocol::MessageKind;
use humantool_core::taskgraph::NodeStatus;

fn host_for(plan_name: &str) -> Host {
    Host::new(vec![profile()], Arc::new(ScriptedPlanner::new(plan(plan_name))), HostConfig::default())
}

#[test]
fn trip_finishes_with_every_leaf_done() {
    let (session, summary) = run_fixture("trip", "trip5", "trip5", SessionConfig::default());
    assert!(session.is_terminal());
    assert!(!summary.aborted);
    assert!(summary.failed_authority_nodes.is_empty());
    assert_eq!(summary.census.get(&NodeStatus::Done), Some(&5));
    assert_eq!(summary.ai_executions, 2);
}

#[test]
fn silent_approver_fails_the_payment_but_the_session_ends() {
    let (session, summary) = run_fixture("porto", "booking", "booking.silent", SessionConfig::default());
    assert!(session.is_terminal());
    assert_eq!(summary.failed_authority_nodes, vec!["confirm".to_string()]);
    let timed_out = summary.records.iter().filter(|r| r.outcome == RecordOutcome::TimedOut).count();
    assert_eq!(timed_out, 1);
    // Nothing was executed in place of the missing approval.
    let ai_on_confirm = session
        .log()
        .events()
        .iter()
        .any(|e| matches!(e, SessionEvent::Invocation(r) if r.node_id == "confirm" && r.behavior.is_none()));
    assert!(!ai_on_confirm);
}

#[test]
fn approved_booking_has_no_failures() {
    let (_, summary) = run_fixture("porto", "booking", "booking", SessionConfig::default());
    assert!(summary.failed_authority_nodes.is_empty());
    assert_eq!(summary.census.get(&NodeStatus::Done), Some(&5));
}

#[test]
fn ai_only_and_human_tool_agree_on_an_all_ai_plan() {
    let (_, human) = run_fixture("a", "all_ai", "booking", SessionConfig::with_mode(Mode::HumanTool));
    let (_, ai) = run_fixture("a", "all_ai", "booking", SessionConfig::with_mode(Mode::AiOnly));
    assert_eq!(human.tree_hash, ai.tree_hash);
    assert_eq!(ai.calls_issued, 0);
    assert_eq!(human.ai_executions, ai.ai_executions);
}

#[test]
fn host_ai_only_sends_no_tool_calls() {
    let mut host = host_for("booking");
    let mut script = responses("booking");
    let run = drive_host(&mut host, "porto", "Book a weekend in Porto", "ai_only", &mut script);
    assert_eq!(run.tool_calls, 0);
    assert!(host.session("porto").unwrap().is_terminal());
    assert!(run.outbound.iter().all(|m| m.kind != MessageKind::Error));
}

#[test]
fn host_run_matches_direct_run() {
    let mut host = host_for("booking");
    let mut script = responses("booking");
    let run = drive_host(&mut host, "porto", "Book a weekend in Porto", "human_tool", &mut script);
    let (direct, _) = run_fixture("porto", "booking", "booking", SessionConfig::default());
    let hosted = host.session("porto").unwrap();
    assert!(hosted.is_terminal());
    assert_eq!(hosted.state().tree.census(), direct.state().tree.census());
    assert_eq!(run.tool_calls as u64, direct.state().calls_issued);
    // One notification per log entry, in order.
    let seqs: Vec<u64> = run
        .outbound
        .iter()
        .filter(|m| m.method.as_deref() == Some("session/events"))
        .map(|m| m.payload.as_ref().unwrap()["sequence_number"].as_u64().unwrap())
        .collect();
    assert_eq!(seqs, (1..=hosted.log().last_sequence()).collect::<Vec<_>>());
}

#[test]
fn host_silent_approver_times_out_over_the_wire() {
    let mut host = host_for("booking");
    let mut script = responses("booking.silent");
    drive_host(&mut host, "porto", "Book a weekend in Porto", "human_tool", &mut script);
    let s = host.session("porto").unwrap();
    assert!(s.is_terminal());
    assert_eq!(s.state().tree.get("confirm").unwrap().status, NodeStatus::Failed);
}

#[test]
fn session_events_resends_from_any_point() {
    let mut host = host_for("booking");
    let mut script = ResponseScript::default();
    drive_host(&mut host, "porto", "Book a weekend in Porto", "human_tool", &mut script);
    let last = host.session("porto").unwrap().log().last_sequence();
    let now = start_time();
    let out = host.handle("porto", humantool_core::protocol::WireMessage::request(99, "session/events", serde_json::json!({"since": 3})), now);
    let body = out[0].payload.as_ref().unwrap();
    assert_eq!(body["last_sequence"].as_u64().unwrap(), last);
    let entries = body["entries"].as_array().unwrap();
    assert_eq!(entries.len() as u64, last - 3);
    assert_eq!(entries[0]["sequence_number"], 4);
}

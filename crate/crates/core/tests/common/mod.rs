#![allow(dead_code)]

use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use humantool_core::orchestrator::{run_to_completion, ResponseScript, Session, SessionConfig, SessionSummary};
use humantool_core::planner::{ScriptedPlan, ScriptedPlanner};
use humantool_core::protocol::{MessageKind, Method, RequestId, WireMessage, PROTOCOL_VERSION};
use humantool_core::schema::HumanToolProfile;
use rand::Rng;
use serde_json::{json, Map, Value};

pub fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

pub fn fixture(name: &str) -> PathBuf {
    repo_root().join("fixtures").join(name)
}

pub fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn read_json<T: serde::de::DeserializeOwned>(name: &str) -> T {
    let text = std::fs::read_to_string(fixture(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
    serde_json::from_str(&text).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub fn profile() -> HumanToolProfile {
    read_json("ana.profile.json")
}

pub fn plan(name: &str) -> ScriptedPlan {
    read_json(&format!("{name}.plan.json"))
}

pub fn responses(name: &str) -> ResponseScript {
    read_json(&format!("{name}.responses.json"))
}

pub fn start_time() -> DateTime<Utc> {
    humantool_core::sim::epoch()
}

/// Runs a fixture plan to the end with a fixture response script.
pub fn run_fixture(session_id: &str, plan_name: &str, responses_name: &str, config: SessionConfig) -> (Session, SessionSummary) {
    let plan = plan(plan_name);
    let goal = plan.goal_pattern.clone();
    let planner = ScriptedPlanner::new(plan);
    let mut session = Session::start(session_id, profile(), &goal, &planner, config, start_time()).unwrap();
    let mut script = responses(responses_name);
    let summary = run_to_completion(&mut session, &planner, &mut script, start_time()).unwrap();
    (session, summary)
}

/// Compares `actual` to a frozen golden file. With `UPDATE_GOLDEN=1` the
/// file is (re)written instead.
pub fn check_golden(name: &str, actual: &[u8]) {
    let path = golden_dir().join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("golden {}: {e} (run with UPDATE_GOLDEN=1)", path.display()));
    assert!(expected == actual, "golden mismatch for {name}:\n--- expected\n{}\n--- actual\n{}",
        String::from_utf8_lossy(&expected), String::from_utf8_lossy(actual));
}

fn random_string(rng: &mut impl Rng) -> String {
    const POOL: &[&str] = &["a", "Z", "0", " ", "é", "日", "\"", "\\", "\n", "\t", "/", "{", "}", "🙂", "\u{0001}"];
    let n = rng.random_range(0..12);
    (0..n).map(|_| POOL[rng.random_range(0..POOL.len())]).collect()
}

fn random_value(rng: &mut impl Rng, depth: u32) -> Value {
    let pick = if depth >= 3 { rng.random_range(0..5) } else { rng.random_range(0..7) };
    match pick {
        0 => Value::Null,
        1 => Value::Bool(rng.random_bool(0.5)),
        2 => json!(rng.random_range(-1_000_000i64..1_000_000)),
        3 => json!(rng.random_range(-1000..1000) as f64 / 8.0),
        4 => Value::String(random_string(rng)),
        5 => Value::Array((0..rng.random_range(0..4)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.random_range(0..4) {
                m.insert(random_string(rng), random_value(rng, depth + 1));
            }
            Value::Object(m)
        }
    }
}

/// `null` is how an absent optional field reads back, so optional bodies avoid it.
fn random_body(rng: &mut impl Rng, depth: u32) -> Value {
    match random_value(rng, depth) {
        Value::Null => json!({}),
        v => v,
    }
}

fn random_id(rng: &mut impl Rng) -> RequestId {
    if rng.random_bool(0.5) {
        RequestId::Int(rng.random_range(-1_000..1_000_000))
    } else {
        RequestId::Str(format!("req-{}{}", rng.next_u32(), random_string(rng)))
    }
}

fn random_method(rng: &mut impl Rng) -> String {
    if rng.random_bool(0.8) {
        Method::ALL[rng.random_range(0..Method::ALL.len())].name().to_string()
    } else {
        format!("x/{}", random_string(rng).replace(char::is_whitespace, "_"))
    }
}

/// A random message that passes `WireMessage::validate`.
pub fn random_message(rng: &mut impl Rng) -> WireMessage {
    let payload = if rng.random_bool(0.9) { Some(random_body(rng, 0)) } else { None };
    let mut msg = match rng.random_range(0..4) {
        0 => WireMessage { payload, ..WireMessage::request(random_id(rng), &random_method(rng), Value::Null) },
        1 => WireMessage { payload, ..WireMessage::response(random_id(rng), Value::Null) },
        2 => WireMessage { payload, ..WireMessage::notification(&random_method(rng), Value::Null) },
        _ => {
            let codes = humantool_core::protocol::ErrorCode::ALL;
            let code = codes[rng.random_range(0..codes.len())];
            let id = rng.random_bool(0.7).then(|| random_id(rng));
            let data = rng.random_bool(0.5).then(|| random_body(rng, 1));
            WireMessage::error(id, code, random_string(rng), data)
        }
    };
    if msg.kind != MessageKind::Error && msg.method.as_deref() == Some("") {
        msg.method = Some("tools/list".into());
    }
    for _ in 0..rng.random_range(0..3) {
        msg.extra.insert(format!("x-ext-{}", rng.random_range(0..100)), random_value(rng, 2));
    }
    assert_eq!(msg.protocol_version, PROTOCOL_VERSION);
    msg
}

/// Messages whose encodings are frozen under `tests/golden/frames`.
pub fn golden_messages() -> Vec<(&'static str, WireMessage)> {
    use humantool_core::interaction::{compose_call, Behavior, Stage};
    use humantool_core::protocol::{ErrorCode, HumanToolCall};
    use humantool_core::taskgraph::{InvocationReason, RequirementFlag, TaskNode};

    let node = TaskNode::leaf("confirm", "Pay for the hotel and train", [RequirementFlag::SafetyCritical]);
    let payload = compose_call(
        Behavior::Approve,
        Stage::During,
        &node,
        Some(InvocationReason::AuthorityControl),
        "Shall I pay 412 EUR for the hotel and train now?",
    )
    .unwrap();
    let issued = start_time();
    let call = HumanToolCall {
        call_id: "porto-c0005".into(),
        session_id: "porto".into(),
        node_id: payload.node_id,
        stage: payload.stage,
        behavior: payload.behavior,
        reason: payload.reason,
        prompt_text: payload.prompt_text,
        response_kind: payload.response_kind,
        deadline: issued + chrono::Duration::seconds(300),
        issued_at: issued,
    };
    vec![
        ("tools_list_request", WireMessage::request(1, "tools/list", json!({}))),
        (
            "tools_call_request",
            WireMessage::request(RequestId::Str(call.call_id.clone()), "tools/call", serde_json::to_value(&call).unwrap()),
        ),
        (
            "tools_respond_request",
            WireMessage::request(
                7,
                "tools/respond",
                json!({"call_id": "porto-c0005", "outcome": {"type": "answered", "payload": {"type": "approval", "value": true}}}),
            ),
        ),
        ("session_start_request", WireMessage::request("start-1", "session/start", json!({"goal": "Book a weekend in Porto"}))),
        ("past_deadline_error", WireMessage::error(Some(RequestId::Int(7)), ErrorCode::PastDeadline, "call `porto-c0005` is past its deadline", None)),
        ("session_events_notification", WireMessage::notification("session/events", json!({"sequence_number": 12, "kind": "stage_change", "body": {"from": "during", "to": "ending", "event": "all_nodes_terminal", "at": "2025-01-01T09:10:00Z"}}))),
    ]
}

/// Byte strings the decoder must reject without panicking.
pub fn malformed_frames() -> Vec<(&'static str, Vec<u8>)> {
    let good = humantool_core::protocol::encode(&WireMessage::request(1, "tools/list", json!({}))).unwrap();
    let body = |s: &str| format!("LEN {:08}\n{s}", s.len()).into_bytes();
    vec![
        ("empty", vec![]),
        ("garbage", b"\x00\xff\xfe garbage".to_vec()),
        ("lowercase header", b"len 00000002\n{}".to_vec()),
        ("short header", b"LEN 12\n{}".to_vec()),
        ("non digit length", b"LEN 0000000x\n{}".to_vec()),
        ("missing newline", b"LEN 00000002 {}".to_vec()),
        ("header only", b"LEN 00000010\n".to_vec()),
        ("truncated body", good[..good.len() - 5].to_vec()),
        ("truncated header", good[..7].to_vec()),
        ("trailing bytes", [good.clone(), b"xx".to_vec()].concat()),
        ("invalid utf8", [b"LEN 00000004\n".to_vec(), vec![0x22, 0xc3, 0x28, 0x22]].concat()),
        ("not json", body("hello")),
        ("json array", body("[1,2,3]")),
        ("json string", body("\"tools/list\"")),
        ("unterminated object", body("{\"kind\":\"request\"")),
        ("missing version", body(r#"{"id":1,"kind":"request","method":"tools/list"}"#)),
        ("wrong version", body(r#"{"protocol_version":"humantool/0","id":1,"kind":"request","method":"tools/list"}"#)),
        ("unknown kind", body(r#"{"protocol_version":"humantool/1","id":1,"kind":"shout","method":"tools/list"}"#)),
        ("request without id", body(r#"{"protocol_version":"humantool/1","kind":"request","method":"tools/list"}"#)),
        ("request without method", body(r#"{"protocol_version":"humantool/1","id":1,"kind":"request"}"#)),
        ("notification with id", body(r#"{"protocol_version":"humantool/1","id":3,"kind":"notification","method":"session/events"}"#)),
        ("error without body", body(r#"{"protocol_version":"humantool/1","id":3,"kind":"error"}"#)),
        ("error code outside registry", body(r#"{"protocol_version":"humantool/1","kind":"error","error":{"code":500,"message":"x"}}"#)),
        ("float id", body(r#"{"protocol_version":"humantool/1","id":1.5,"kind":"request","method":"tools/list"}"#)),
        ("id as object", body(r#"{"protocol_version":"humantool/1","id":{},"kind":"request","method":"tools/list"}"#)),
        ("length larger than body", b"LEN 99999999\n{}".to_vec()),
        ("two frames", [good.clone(), good].concat()),
    ]
}

/// Allocation computed straight from the three invocation conditions, on the
/// raw flag bitmask (bit order: creativity, complex judgment, physical
/// interaction, domain expertise, private info, preferences, safety critical,
/// requires authorization). Returns `None` for AI, else the reason names in
/// precedence order.
pub fn oracle_allocation(mask: u8, cognitive_creativity: u8, delegation: u8, threshold: u8, cutoff: u8) -> Option<Vec<&'static str>> {
    let bit = |i: u8| mask >> i & 1 == 1;
    let authority = bit(6) || (bit(7) && delegation < cutoff);
    let information = bit(3) || bit(4) || bit(5);
    let capability = ((bit(0) || bit(1)) && cognitive_creativity >= threshold) || bit(2);
    let mut reasons = Vec::new();
    if authority {
        reasons.push("authority_control");
    }
    if information {
        reasons.push("information_exchange");
    }
    if capability {
        reasons.push("capability_complementarity");
    }
    (!reasons.is_empty()).then_some(reasons)
}

/// Reasons of an allocation as names, `None` for AI.
pub fn allocation_names(a: &humantool_core::taskgraph::Allocation) -> Option<Vec<&'static str>> {
    use humantool_core::taskgraph::Actor;
    match a.actor() {
        Actor::Ai => None,
        Actor::Human => Some(a.reasons().iter().map(|r| r.as_str()).collect()),
    }
}

/// Everything a console saw while driving one session through a [`Host`].
pub struct HostRun {
    pub outbound: Vec<WireMessage>,
    pub tool_calls: usize,
}

fn through_wire(msg: WireMessage) -> WireMessage {
    let bytes = humantool_core::protocol::encode(&msg).unwrap();
    humantool_core::protocol::decode(&bytes).unwrap()
}

/// Starts `goal` on `host` and answers every tools/call from `source`, with
/// every message passing through the frame encoder both ways. Deadlines are
/// driven by `host.tick` on a virtual clock.
pub fn drive_host(
    host: &mut humantool_core::host::Host,
    session_id: &str,
    goal: &str,
    mode: &str,
    source: &mut dyn humantool_core::orchestrator::ResponseSource,
) -> HostRun {
    use humantool_core::protocol::HumanToolCall;
    let mut now = start_time();
    let mut outbound = Vec::new();
    let mut queue: Vec<WireMessage> =
        host.handle(session_id, through_wire(WireMessage::request(0, "session/start", json!({"goal": goal, "mode": mode}))), now)
            .into_iter()
            .map(through_wire)
            .collect();
    let mut next_id = 1i64;
    let mut tool_calls = 0;
    for _ in 0..10_000 {
        let Some(msg) = (!queue.is_empty()).then(|| queue.remove(0)) else { break };
        outbound.push(msg.clone());
        if msg.kind != MessageKind::Request || msg.method.as_deref() != Some("tools/call") {
            continue;
        }
        tool_calls += 1;
        let call: HumanToolCall = serde_json::from_value(msg.payload.clone().unwrap()).unwrap();
        let reply = source.respond(&call);
        now = now.max(call.issued_at) + chrono::Duration::milliseconds(reply.latency_ms as i64);
        match reply.step.outcome_for(&call) {
            Some(outcome) => {
                let req = WireMessage::request(
                    next_id,
                    "tools/respond",
                    json!({"call_id": call.call_id, "outcome": outcome, "received_at": now}),
                );
                next_id += 1;
                queue.extend(host.handle(session_id, through_wire(req), now).into_iter().map(through_wire));
            }
            None => {
                now = call.deadline + chrono::Duration::milliseconds(1);
                queue.extend(host.tick(now).remove(session_id).unwrap_or_default().into_iter().map(through_wire));
            }
        }
    }
    HostRun { outbound, tool_calls }
}

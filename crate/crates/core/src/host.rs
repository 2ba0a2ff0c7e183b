//! Method dispatch over many sessions. Transports feed decoded messages in
//! and send back whatever comes out; the host itself is synchronous and
//! transport-agnostic.
//!
//! Per session, outbound traffic is: responses and errors for console
//! requests, `session/events` notifications carrying each new log entry, and
//! a `tools/call` request (id = call id) whenever a new human call opens.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::orchestrator::{Mode, OrchestratorError, Session, SessionConfig};
use crate::planner::Planner;
use crate::protocol::{
    ErrorCode, HumanToolResponse, MessageKind, Method, RequestId, ResponseOutcome, WireMessage,
};
use crate::schema::{render_tool_descriptor, HumanToolProfile};
use crate::store::{FsyncPolicy, LogError, LogWriter};

#[derive(Debug, Clone)]
pub struct HostConfig {
    pub session: SessionConfig,
    /// Where logs go; `None` keeps everything in memory.
    pub workdir: Option<PathBuf>,
    pub fsync: FsyncPolicy,
    /// Lets one human serve several open sessions at once.
    pub allow_concurrent_sessions: bool,
}

impl Default for HostConfig {
    fn default() -> Self {
        Self { session: SessionConfig::default(), workdir: None, fsync: FsyncPolicy::default(), allow_concurrent_sessions: false }
    }
}

struct Hosted {
    session: Session,
    writer: Option<LogWriter>,
    /// Last sequence number pushed as a notification.
    notified: u64,
    /// Last call id pushed as a tools/call request.
    announced: Option<String>,
}

pub struct Host {
    profiles: Vec<HumanToolProfile>,
    planner: Arc<dyn Planner>,
    config: HostConfig,
    sessions: BTreeMap<String, Hosted>,
}

#[derive(Debug, Deserialize)]
struct StartParams {
    goal: String,
    #[serde(default)]
    human_id: Option<String>,
    #[serde(default)]
    mode: Option<Mode>,
}

#[derive(Debug, Deserialize)]
struct RespondParams {
    call_id: String,
    outcome: ResponseOutcome,
    #[serde(default)]
    received_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Deserialize, Default)]
struct EventsParams {
    #[serde(default)]
    since: u64,
}

type Reply = Result<Value, (ErrorCode, String)>;

fn invalid(message: impl Into<String>) -> (ErrorCode, String) {
    (ErrorCode::InvalidMessage, message.into())
}

impl Host {
    pub fn new(profiles: Vec<HumanToolProfile>, planner: Arc<dyn Planner>, config: HostConfig) -> Self {
        Self { profiles, planner, config, sessions: BTreeMap::new() }
    }

    pub fn session(&self, session_id: &str) -> Option<&Session> {
        self.sessions.get(session_id).map(|h| &h.session)
    }

    pub fn session_ids(&self) -> impl Iterator<Item = &str> {
        self.sessions.keys().map(String::as_str)
    }

    /// Earliest deadline among pending calls.
    pub fn next_deadline(&self) -> Option<DateTime<Utc>> {
        self.sessions.values().filter_map(|h| h.session.pending_call().map(|c| c.deadline)).min()
    }

    /// Handles one inbound message on the channel bound to `session_id`.
    pub fn handle(&mut self, session_id: &str, message: WireMessage, now: DateTime<Utc>) -> Vec<WireMessage> {
        if let Err(e) = message.validate() {
            return vec![WireMessage::error(message.id.clone(), ErrorCode::InvalidMessage, e, None)];
        }
        match message.kind {
            MessageKind::Request => {}
            // Acknowledgements of our tools/call requests carry nothing we need.
            MessageKind::Response | MessageKind::Error => return Vec::new(),
            MessageKind::Notification => {
                let name = message.method.as_deref().unwrap_or_default();
                return match Method::route(name) {
                    Ok(_) => Vec::new(),
                    Err(code) => vec![WireMessage::error(None, code, format!("unknown method `{name}`"), None)],
                };
            }
        }
        let id = message.id.clone().expect("validated request has an id");
        let name = message.method.clone().unwrap_or_default();
        let payload = message.payload.clone().unwrap_or(Value::Null);
        let reply: Reply = match Method::route(&name) {
            Err(code) => Err((code, format!("unknown method `{name}`"))),
            Ok(Method::ToolsList) => Ok(self.tools_list()),
            Ok(Method::SessionStart) => self.start(session_id, payload, now),
            Ok(Method::ToolsRespond) => self.respond(session_id, payload, now),
            Ok(Method::SessionEvents) => self.events(session_id, payload),
            Ok(Method::SessionAbort) => self.abort(session_id, now),
            Ok(Method::ToolsCall) => Err(invalid("tools/call is sent by the orchestrator, not to it")),
        };
        let mut out = vec![match reply {
            Ok(v) => WireMessage::response(id.clone(), v),
            Err((code, msg)) => WireMessage::error(Some(id), code, msg, None),
        }];
        out.extend(self.drain(session_id));
        out
    }

    fn tools_list(&self) -> Value {
        let tools: Vec<Value> = self
            .profiles
            .iter()
            .filter_map(|p| render_tool_descriptor(p).ok())
            .map(|d| serde_json::to_value(d).expect("descriptor serializes"))
            .collect();
        json!({ "tools": tools })
    }

    fn start(&mut self, session_id: &str, payload: Value, now: DateTime<Utc>) -> Reply {
        let params: StartParams = serde_json::from_value(payload).map_err(|e| invalid(e.to_string()))?;
        if self.sessions.contains_key(session_id) {
            return Err(invalid(format!("session `{session_id}` already exists")));
        }
        let profile = match &params.human_id {
            Some(h) => self.profiles.iter().find(|p| &p.human_id == h),
            None => self.profiles.first(),
        }
        .cloned()
        .ok_or_else(|| invalid("no such human registered"))?;
        if !self.config.allow_concurrent_sessions {
            let busy = self
                .sessions
                .values()
                .any(|h| !h.session.is_terminal() && h.session.state().profile.human_id == profile.human_id);
            if busy {
                return Err(invalid(format!("human `{}` is already serving an open session", profile.human_id)));
            }
        }
        let mut config = self.config.session.clone();
        if let Some(mode) = params.mode {
            config.mode = mode;
        }
        let planner = Arc::clone(&self.planner);
        let mut session = Session::start(session_id, profile, &params.goal, planner.as_ref(), config, now)
            .map_err(|e| invalid(e.to_string()))?;
        session.advance(planner.as_ref(), now).map_err(|e| invalid(e.to_string()))?;
        let writer = match &self.config.workdir {
            Some(dir) => Some(LogWriter::open(dir, session_id, self.config.fsync).map_err(storage)?),
            None => None,
        };
        self.sessions.insert(session_id.to_string(), Hosted { session, writer, notified: 0, announced: None });
        self.persist(session_id).map_err(storage)?;
        let s = &self.sessions[session_id].session;
        Ok(json!({ "session_id": session_id, "stage": s.state().stage, "mode": s.state().header.mode }))
    }

    fn hosted(&mut self, session_id: &str) -> Result<&mut Hosted, (ErrorCode, String)> {
        self.sessions.get_mut(session_id).ok_or_else(|| invalid(format!("unknown session `{session_id}`")))
    }

    fn respond(&mut self, session_id: &str, payload: Value, now: DateTime<Utc>) -> Reply {
        let params: RespondParams = serde_json::from_value(payload).map_err(|e| invalid(e.to_string()))?;
        let planner = Arc::clone(&self.planner);
        let hosted = self.hosted(session_id)?;
        let response = HumanToolResponse {
            call_id: params.call_id.clone(),
            outcome: params.outcome,
            received_at: params.received_at.unwrap_or(now),
        };
        let result = hosted.session.deliver_response(response, planner.as_ref(), now);
        let advanced = match &result {
            Ok(()) | Err(OrchestratorError::Rejected { .. }) if !hosted.session.is_terminal() => {
                if hosted.session.pending_call().is_none() {
                    hosted.session.advance(planner.as_ref(), now).map(|_| ())
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        };
        self.persist(session_id).map_err(storage)?;
        advanced.map_err(|e| invalid(e.to_string()))?;
        match result {
            Ok(()) => Ok(json!({ "call_id": params.call_id, "accepted": true })),
            Err(OrchestratorError::Rejected { code, message }) => Err((code, message)),
            Err(e) => Err(invalid(e.to_string())),
        }
    }

    fn events(&mut self, session_id: &str, payload: Value) -> Reply {
        let params: EventsParams = if payload.is_null() {
            EventsParams::default()
        } else {
            serde_json::from_value(payload).map_err(|e| invalid(e.to_string()))?
        };
        let hosted = self.hosted(session_id)?;
        let entries = hosted.session.log().entries_after(params.since);
        Ok(json!({ "entries": entries, "last_sequence": hosted.session.log().last_sequence() }))
    }

    fn abort(&mut self, session_id: &str, now: DateTime<Utc>) -> Reply {
        let hosted = self.hosted(session_id)?;
        hosted.session.abort(now).map_err(|e| invalid(e.to_string()))?;
        self.persist(session_id).map_err(storage)?;
        Ok(json!({ "session_id": session_id, "stage": "ending" }))
    }

    /// Deadline clock. Returns outbound messages grouped by session.
    pub fn tick(&mut self, now: DateTime<Utc>) -> BTreeMap<String, Vec<WireMessage>> {
        let planner = Arc::clone(&self.planner);
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        let mut out = BTreeMap::new();
        for id in ids {
            let hosted = self.sessions.get_mut(&id).expect("listed");
            let fired = hosted.session.tick(planner.as_ref(), now);
            if let Ok(true) = fired {
                if hosted.session.pending_call().is_none() && !hosted.session.is_terminal() {
                    let _ = hosted.session.advance(planner.as_ref(), now);
                }
                let _ = self.persist(&id);
            }
            let msgs = self.drain(&id);
            if !msgs.is_empty() {
                out.insert(id, msgs);
            }
        }
        out
    }

    /// Aborts every open session (graceful shutdown).
    pub fn shutdown(&mut self, now: DateTime<Utc>) -> BTreeMap<String, Vec<WireMessage>> {
        let planner = Arc::clone(&self.planner);
        let ids: Vec<String> = self.sessions.keys().cloned().collect();
        let mut out = BTreeMap::new();
        for id in ids {
            let hosted = self.sessions.get_mut(&id).expect("listed");
            if !hosted.session.is_terminal() {
                let _ = hosted.session.abort(now);
            }
            let _ = self.persist(&id);
            out.insert(id.clone(), self.drain(&id));
        }
        // The planner is shared, so it is only cancelled once every session is done.
        planner.cancel();
        out
    }

    /// Flushes unwritten entries to disk and refreshes the snapshot.
    fn persist(&mut self, session_id: &str) -> Result<(), LogError> {
        let Some(hosted) = self.sessions.get_mut(session_id) else { return Ok(()) };
        if let Some(w) = hosted.writer.as_mut() {
            if w.sync_from(hosted.session.log())? > 0 {
                w.write_snapshot(hosted.session.state())?;
            }
        }
        Ok(())
    }

    /// New event notifications plus a tools/call for a newly opened call.
    fn drain(&mut self, session_id: &str) -> Vec<WireMessage> {
        let Some(hosted) = self.sessions.get_mut(session_id) else { return Vec::new() };
        let mut out: Vec<WireMessage> = hosted
            .session
            .log()
            .entries_after(hosted.notified)
            .into_iter()
            .map(|e| {
                WireMessage::notification(Method::SessionEvents.name(), serde_json::to_value(e).expect("entry serializes"))
            })
            .collect();
        hosted.notified = hosted.session.log().last_sequence();
        if let Some(call) = hosted.session.pending_call() {
            if hosted.announced.as_deref() != Some(call.call_id.as_str()) {
                hosted.announced = Some(call.call_id.clone());
                out.push(WireMessage::request(
                    RequestId::Str(call.call_id.clone()),
                    Method::ToolsCall.name(),
                    serde_json::to_value(call).expect("call serializes"),
                ));
            }
        }
        out
    }
}

fn storage(e: LogError) -> (ErrorCode, String) {
    invalid(format!("storage failure: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::{ScriptedPlan, ScriptedPlanner};
    use crate::schema::Domain;
    use crate::taskgraph::{RequirementFlag, TaskNode, TaskTree};

    fn host() -> Host {
        let tree = TaskTree::new(vec![
            TaskNode::branch("root", "trip", &["pick", "book"]),
            TaskNode::leaf("pick", "pick a city", [RequirementFlag::NeedsPreferences]),
            TaskNode::leaf("book", "book it", []),
        ])
        .unwrap();
        let planner = ScriptedPlanner::new(ScriptedPlan::new("plan a trip", tree).with_all_outputs());
        Host::new(vec![HumanToolProfile::uniform("ana", Domain::TravelPlanning, 3)], Arc::new(planner), HostConfig::default())
    }

    #[test]
    fn tools_list_returns_one_descriptor() {
        let mut h = host();
        let out = h.handle("s1", WireMessage::request(1, "tools/list", json!({})), Utc::now());
        assert_eq!(out[0].payload.as_ref().unwrap()["tools"].as_array().unwrap().len(), 1);
    }

    #[test]
    fn unknown_method_is_rejected() {
        let mut h = host();
        let out = h.handle("s1", WireMessage::request(1, "tools/explode", json!({})), Utc::now());
        assert_eq!(out[0].error.as_ref().unwrap().code, -32601);
    }

    #[test]
    fn start_emits_prime_call() {
        let mut h = host();
        let out = h.handle("s1", WireMessage::request(1, "session/start", json!({"goal": "plan a trip"})), Utc::now());
        assert_eq!(out[0].kind, MessageKind::Response);
        let call = out.iter().find(|m| m.method.as_deref() == Some("tools/call")).expect("tools/call sent");
        assert_eq!(call.payload.as_ref().unwrap()["behavior"], "prime");
    }

    #[test]
    fn second_open_session_for_same_human_is_refused() {
        let mut h = host();
        let now = Utc::now();
        h.handle("s1", WireMessage::request(1, "session/start", json!({"goal": "plan a trip"})), now);
        let out = h.handle("s2", WireMessage::request(1, "session/start", json!({"goal": "plan a trip"})), now);
        assert_eq!(out[0].kind, MessageKind::Error);
    }
}

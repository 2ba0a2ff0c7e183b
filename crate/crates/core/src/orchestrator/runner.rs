//! Drives a session to its end against a response source, advancing a
//! virtual clock. Used by `run`, the simulator, and the tests.

use std::collections::BTreeMap;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};

use super::{OrchestratorError, RecordOutcome, Session, SessionEvent};
use crate::interaction::{Behavior, ResponseKind};
use crate::planner::Planner;
use crate::protocol::{AnswerPayload, HumanToolCall, HumanToolResponse, ResponseOutcome};
use crate::taskgraph::{InvocationReason, NodeStatus};

use super::InvocationRecord;

/// What a scripted human does with one call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum ScriptStep {
    /// Answers in whatever shape the call asks for. `text` fills free-text
    /// answers, `approve` approvals, `choice` choice indices.
    Answer {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        text: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        approve: Option<bool>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        choice: Option<usize>,
    },
    Refuse {
        #[serde(default)]
        reason: String,
    },
    Counter {
        proposal: String,
    },
    /// Never answers; the call times out.
    NoResponse,
}

impl ScriptStep {
    pub fn answer() -> Self {
        ScriptStep::Answer { text: None, approve: None, choice: None }
    }

    pub fn answer_text(text: &str) -> Self {
        ScriptStep::Answer { text: Some(text.to_string()), approve: None, choice: None }
    }

    pub fn refuse(reason: &str) -> Self {
        ScriptStep::Refuse { reason: reason.to_string() }
    }

    pub fn counter(proposal: &str) -> Self {
        ScriptStep::Counter { proposal: proposal.to_string() }
    }

    /// Turns the step into an outcome for `call`, or `None` for no response.
    pub fn outcome_for(&self, call: &HumanToolCall) -> Option<ResponseOutcome> {
        Some(match self {
            ScriptStep::NoResponse => return None,
            ScriptStep::Refuse { reason } => ResponseOutcome::Refused { reason_text: reason.clone() },
            ScriptStep::Counter { proposal } => ResponseOutcome::CounterProposal { proposal_text: proposal.clone() },
            ScriptStep::Answer { text, approve, choice } => {
                let payload = match &call.response_kind {
                    ResponseKind::Approval => AnswerPayload::Approval(approve.unwrap_or(true)),
                    ResponseKind::Choice { options } => {
                        AnswerPayload::Choice(choice.unwrap_or(0).min(options.len().saturating_sub(1)))
                    }
                    ResponseKind::FreeText { .. } => AnswerPayload::Text(
                        text.clone().unwrap_or_else(|| format!("answer for {}", call.node_id)),
                    ),
                };
                ResponseOutcome::Answered { payload }
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedReply {
    pub step: ScriptStep,
    /// Delay between issue and delivery. Ignored for `no_response`.
    pub latency_ms: u64,
}

pub trait ResponseSource {
    fn respond(&mut self, call: &HumanToolCall) -> ScriptedReply;
}

/// Matches calls by node and/or behavior. Replies are used in order; the
/// last one repeats.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
    pub replies: Vec<ScriptStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

impl ScriptRule {
    fn matches(&self, call: &HumanToolCall) -> bool {
        self.node_id.as_deref().map_or(true, |n| n == call.node_id)
            && self.behavior.map_or(true, |b| b == call.behavior)
    }
}

/// A scripted human, loadable from JSON.
///
/// ```json
/// {"default": {"action": "answer"},
///  "rules": [{"node_id": "book", "replies": [{"action": "refuse", "reason": "no"}]}]}
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseScript {
    #[serde(default = "default_step")]
    pub default: ScriptStep,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default = "default_latency")]
    pub latency_ms: u64,
    #[serde(skip)]
    cursor: BTreeMap<usize, usize>,
}

fn default_step() -> ScriptStep {
    ScriptStep::answer()
}

fn default_latency() -> u64 {
    1_000
}

impl Default for ResponseScript {
    fn default() -> Self {
        Self::always(ScriptStep::answer())
    }
}

impl ResponseScript {
    pub fn always(step: ScriptStep) -> Self {
        Self { default: step, rules: Vec::new(), latency_ms: default_latency(), cursor: BTreeMap::new() }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn for_node(self, node_id: &str, replies: Vec<ScriptStep>) -> Self {
        self.rule(ScriptRule { node_id: Some(node_id.to_string()), behavior: None, replies, latency_ms: None })
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

impl ResponseSource for ResponseScript {
    fn respond(&mut self, call: &HumanToolCall) -> ScriptedReply {
        for (i, rule) in self.rules.iter().enumerate() {
            if !rule.matches(call) || rule.replies.is_empty() {
                continue;
            }
            let used = self.cursor.entry(i).or_insert(0);
            let step = rule.replies[(*used).min(rule.replies.len() - 1)].clone();
            *used += 1;
            return ScriptedReply { step, latency_ms: rule.latency_ms.unwrap_or(self.latency_ms) };
        }
        ScriptedReply { step: self.default.clone(), latency_ms: self.latency_ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub census: BTreeMap<NodeStatus, usize>,
    /// Closed human calls caused by allocation (they carry a reason).
    pub human_invocations: usize,
    /// Every human call issued, including opening, repair and closing calls.
    pub calls_issued: u64,
    pub ai_executions: usize,
    pub failed_authority_nodes: Vec<String>,
    pub aborted: bool,
    pub state_hash: String,
    pub tree_hash: String,
    pub records: Vec<InvocationRecord>,
}

impl SessionSummary {
    pub fn of(session: &Session) -> Self {
        let state = session.state();
        let records: Vec<InvocationRecord> = session
            .log()
            .events()
            .iter()
            .filter_map(|e| match e {
                SessionEvent::Invocation(r) => Some(r.clone()),
                _ => None,
            })
            .collect();
        let failed_authority_nodes = state
            .tree
            .leaves()
            .into_iter()
            .filter(|l| l.status == NodeStatus::Failed)
            .filter(|l| l.allocation.as_ref().is_some_and(|a| a.has_reason(InvocationReason::AuthorityControl)))
            .map(|l| l.id.clone())
            .collect();
        let aborted = session.log().events().iter().any(|e| {
            matches!(e, SessionEvent::StageChange { event: crate::interaction::StageEvent::SessionAborted, .. })
        });
        Self {
            session_id: state.header.session_id.clone(),
            census: state.tree.census(),
            human_invocations: records.iter().filter(|r| r.reason.is_some() && r.outcome.is_human()).count(),
            calls_issued: state.calls_issued,
            ai_executions: records.iter().filter(|r| r.outcome == RecordOutcome::AiExecuted).count(),
            failed_authority_nodes,
            aborted,
            state_hash: state.state_hash(),
            tree_hash: state.tree_hash(),
            records,
        }
    }
}

/// Upper bound on loop iterations; a session that needs more is stuck.
pub const MAX_ITERATIONS: usize = 100_000;

/// Runs the session until it ends. The virtual clock starts at `now` and
/// moves forward by each reply's latency, or past the deadline on silence.
pub fn run_to_completion(
    session: &mut Session,
    planner: &dyn Planner,
    source: &mut dyn ResponseSource,
    mut now: DateTime<Utc>,
) -> Result<SessionSummary, OrchestratorError> {
    for _ in 0..MAX_ITERATIONS {
        if session.is_terminal() {
            return Ok(SessionSummary::of(session));
        }
        let Some(call) = session.pending_call().cloned() else {
            session.step(planner, now)?;
            continue;
        };
        let reply = source.respond(&call);
        match reply.step.outcome_for(&call) {
            None => {
                now = now.max(call.deadline + Duration::milliseconds(1));
                session.tick(planner, now)?;
            }
            Some(outcome) => {
                now = now.max(call.issued_at + Duration::milliseconds(reply.latency_ms as i64));
                let response = HumanToolResponse { call_id: call.call_id.clone(), outcome, received_at: now };
                match session.deliver_response(response, planner, now) {
                    Ok(()) => {}
                    // A late scripted reply is applied as a timeout by the session.
                    Err(e) if e.rejection_code().is_some() && session.pending_call().is_none() => {}
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Err(OrchestratorError::Stuck(MAX_ITERATIONS))
}

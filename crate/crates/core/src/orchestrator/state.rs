//! Session state and the events that change it.
//!
//! Every mutation of a [`SessionState`] goes through [`SessionState::apply`];
//! the live engine and log replay share that single path.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::interaction::{Behavior, GuidelineReport, Stage, StageEvent};
use crate::protocol::HumanToolCall;
use crate::schema::HumanToolProfile;
use crate::taskgraph::{AllocationPolicy, InvocationReason, NodeStatus, TaskTree, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    HumanTool,
    AiOnly,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "human-tool" | "human_tool" => Ok(Mode::HumanTool),
            "ai-only" | "ai_only" => Ok(Mode::AiOnly),
            other => Err(format!("unknown mode `{other}` (expected human-tool or ai-only)")),
        }
    }
}

/// Immutable facts fixed when the session starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHeader {
    pub session_id: String,
    pub goal: String,
    pub profile: HumanToolProfile,
    pub mode: Mode,
    pub policy: AllocationPolicy,
    pub timeout_default_ms: u64,
    pub max_negotiation_rounds: u32,
    pub started_at: DateTime<Utc>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairKind {
    /// The human refused a node call.
    Refusal,
    /// AI execution of a node failed.
    FailedExecution,
    /// The human refused the opening call.
    Session,
}

/// Why a call was issued; decides how its outcome is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "purpose", rename_all = "snake_case")]
pub enum CallPurpose {
    Prime,
    Node,
    Repair { kind: RepairKind },
    Closing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingCall {
    pub call: HumanToolCall,
    pub purpose: CallPurpose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordOutcome {
    Answered,
    Refused,
    CounterProposal,
    TimedOut,
    AiExecuted,
}

impl RecordOutcome {
    pub fn is_human(self) -> bool {
        !matches!(self, RecordOutcome::AiExecuted)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecordOutcome::Answered => "answered",
            RecordOutcome::Refused => "refused",
            RecordOutcome::CounterProposal => "counter_proposal",
            RecordOutcome::TimedOut => "timed_out",
            RecordOutcome::AiExecuted => "ai_executed",
        }
    }
}

/// Audit unit for one terminal outcome: a closed human call or an AI execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvocationRecord {
    pub timestamp: DateTime<Utc>,
    pub session_id: String,
    pub node_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub call_id: Option<String>,
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub behavior: Option<Behavior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<InvocationReason>,
    pub outcome: RecordOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TreeMutation {
    Status { node_id: String, status: NodeStatus },
    ReplaceSubtree { node_id: String, subtree: TaskTree },
    Note { node_id: String, text: String },
    Output { node_id: String, text: String },
    PreferenceNotes { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "snake_case")]
pub enum SessionEvent {
    SessionStarted { header: SessionHeader, tree: TaskTree },
    StageChange { from: Stage, to: Stage, event: StageEvent, at: DateTime<Utc> },
    TreeMutation(TreeMutation),
    CallIssued { call: HumanToolCall, purpose: CallPurpose, guidelines: GuidelineReport },
    Invocation(InvocationRecord),
    WireError {
        code: i64,
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        call_id: Option<String>,
        at: DateTime<Utc>,
    },
}

impl SessionEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            SessionEvent::SessionStarted { .. } => "session_started",
            SessionEvent::StageChange { .. } => "stage_change",
            SessionEvent::TreeMutation(_) => "tree_mutation",
            SessionEvent::CallIssued { .. } => "call_issued",
            SessionEvent::Invocation(_) => "invocation",
            SessionEvent::WireError { .. } => "wire_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosedCall {
    pub node_id: String,
    pub deadline: DateTime<Utc>,
    pub outcome: RecordOutcome,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ApplyError {
    #[error("session already started")]
    AlreadyStarted,
    #[error("session not started")]
    NotStarted,
    #[error("stage change from {expected} recorded while stage is {actual}")]
    StageMismatch { expected: Stage, actual: Stage },
    #[error("stage change {from} -> {to} on {event:?} does not follow the transition table")]
    IllegalStageChange { from: Stage, to: Stage, event: StageEvent },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("a call is already pending")]
    CallAlreadyPending,
    #[error("invocation closes call `{0}` which is not pending")]
    NotPending(String),
    #[error("invalid call: {0}")]
    InvalidCall(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub header: SessionHeader,
    /// Current profile; accumulates preference notes.
    pub profile: HumanToolProfile,
    pub tree: TaskTree,
    pub stage: Stage,
    pub pending: Option<PendingCall>,
    pub node_notes: BTreeMap<String, Vec<String>>,
    pub outputs: BTreeMap<String, String>,
    pub refusals: BTreeMap<String, u32>,
    /// Counter-proposals used, keyed by the lineage origin of the node.
    pub negotiation_rounds: BTreeMap<String, u32>,
    /// Nodes introduced by replanning, mapped to the original leaf.
    pub lineage: BTreeMap<String, String>,
    pub closed_calls: BTreeMap<String, ClosedCall>,
    pub calls_issued: u64,
    pub closing_issued: bool,
    pub message_history: Vec<String>,
}

impl SessionState {
    pub fn started(header: SessionHeader, tree: TaskTree) -> Self {
        Self {
            profile: header.profile.clone(),
            header,
            tree,
            stage: Stage::Initial,
            pending: None,
            node_notes: BTreeMap::new(),
            outputs: BTreeMap::new(),
            refusals: BTreeMap::new(),
            negotiation_rounds: BTreeMap::new(),
            lineage: BTreeMap::new(),
            closed_calls: BTreeMap::new(),
            calls_issued: 0,
            closing_issued: false,
            message_history: Vec::new(),
        }
    }

    pub fn origin_of<'a>(&'a self, node_id: &'a str) -> &'a str {
        self.lineage.get(node_id).map(String::as_str).unwrap_or(node_id)
    }

    pub fn rounds_used(&self, node_id: &str) -> u32 {
        self.negotiation_rounds.get(self.origin_of(node_id)).copied().unwrap_or(0)
    }

    pub fn refusals_of(&self, node_id: &str) -> u32 {
        self.refusals.get(node_id).copied().unwrap_or(0)
    }

    pub fn is_terminal(&self) -> bool {
        self.stage == Stage::Ending && self.pending.is_none()
    }

    /// Hash of the full state (canonical JSON, SHA-256).
    pub fn state_hash(&self) -> String {
        crate::state_hash(self).expect("session state serializes")
    }

    /// Hash of the task results only: the tree and the per-node outputs.
    pub fn tree_hash(&self) -> String {
        crate::state_hash(&(&self.tree, &self.outputs)).expect("tree serializes")
    }

    /// Applies one event. `state` is `None` before the session starts.
    pub fn apply(state: &mut Option<SessionState>, event: &SessionEvent) -> Result<(), ApplyError> {
        if let SessionEvent::SessionStarted { header, tree } = event {
            if state.is_some() {
                return Err(ApplyError::AlreadyStarted);
            }
            *state = Some(SessionState::started(header.clone(), tree.clone()));
            return Ok(());
        }
        let s = state.as_mut().ok_or(ApplyError::NotStarted)?;
        s.apply_event(event)
    }

    /// Applies one event to a started session.
    pub fn apply_event(&mut self, event: &SessionEvent) -> Result<(), ApplyError> {
        match event {
            SessionEvent::SessionStarted { .. } => return Err(ApplyError::AlreadyStarted),
            SessionEvent::StageChange { from, to, event, .. } => {
                if *from != self.stage {
                    return Err(ApplyError::StageMismatch { expected: *from, actual: self.stage });
                }
                if crate::interaction::advance_stage(*from, *event) != *to {
                    return Err(ApplyError::IllegalStageChange { from: *from, to: *to, event: *event });
                }
                self.stage = *to;
            }
            SessionEvent::TreeMutation(m) => self.apply_mutation(m)?,
            SessionEvent::CallIssued { call, purpose, .. } => {
                if self.pending.is_some() {
                    return Err(ApplyError::CallAlreadyPending);
                }
                call.validate().map_err(ApplyError::InvalidCall)?;
                if *purpose == CallPurpose::Closing {
                    self.closing_issued = true;
                }
                self.message_history.push(call.prompt_text.clone());
                self.calls_issued += 1;
                self.pending = Some(PendingCall { call: call.clone(), purpose: *purpose });
            }
            SessionEvent::Invocation(record) => {
                if let Some(call_id) = &record.call_id {
                    let pending = self.pending.take().ok_or_else(|| ApplyError::NotPending(call_id.clone()))?;
                    if &pending.call.call_id != call_id {
                        let id = call_id.clone();
                        self.pending = Some(pending);
                        return Err(ApplyError::NotPending(id));
                    }
                    self.closed_calls.insert(
                        call_id.clone(),
                        ClosedCall { node_id: record.node_id.clone(), deadline: pending.call.deadline, outcome: record.outcome },
                    );
                    match record.outcome {
                        RecordOutcome::Refused => *self.refusals.entry(record.node_id.clone()).or_default() += 1,
                        RecordOutcome::CounterProposal => {
                            let origin = self.origin_of(&record.node_id).to_string();
                            if self.rounds_used(&record.node_id) < self.header.max_negotiation_rounds {
                                *self.negotiation_rounds.entry(origin).or_default() += 1;
                            } else {
                                *self.refusals.entry(record.node_id.clone()).or_default() += 1;
                            }
                        }
                        _ => {}
                    }
                }
            }
            SessionEvent::WireError { .. } => {}
        }
        Ok(())
    }

    fn apply_mutation(&mut self, m: &TreeMutation) -> Result<(), ApplyError> {
        match m {
            TreeMutation::Status { node_id, status } => self.tree.mark_status(node_id, *status)?,
            TreeMutation::ReplaceSubtree { node_id, subtree } => {
                let origin = self.origin_of(node_id).to_string();
                self.tree.replace_subtree(node_id, subtree)?;
                for n in subtree.nodes() {
                    if n.id != *node_id {
                        self.lineage.insert(n.id.clone(), origin.clone());
                    }
                }
            }
            TreeMutation::Note { node_id, text } => {
                self.node_notes.entry(node_id.clone()).or_default().push(text.clone());
            }
            TreeMutation::Output { node_id, text } => {
                self.outputs.insert(node_id.clone(), text.clone());
            }
            TreeMutation::PreferenceNotes { text } => {
                if !self.profile.preference_notes.is_empty() {
                    self.profile.preference_notes.push('\n');
                }
                self.profile.preference_notes.push_str(text);
            }
        }
        Ok(())
    }
}

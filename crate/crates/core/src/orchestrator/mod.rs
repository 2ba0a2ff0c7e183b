//! The session engine: renders the tool schema, walks the task tree issuing
//! AI steps and human tool calls per allocation, integrates responses, runs
//! error handling on refusals and failures, and closes the session.
//!
//! One session is a single-writer state machine. At most one human call is
//! pending at a time; the caller drives it with [`Session::step`],
//! [`Session::deliver_response`] and [`Session::tick`] (the deadline clock).

mod runner;
mod state;

use chrono::{DateTime, Duration, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use runner::{
    run_to_completion, ResponseScript, ResponseSource, ScriptRule, ScriptStep, ScriptedReply, SessionSummary,
};
pub use state::{
    ApplyError, CallPurpose, ClosedCall, InvocationRecord, Mode, PendingCall, RecordOutcome, RepairKind, SessionEvent,
    SessionHeader, SessionState, TreeMutation,
};

use crate::interaction::{
    check_guidelines, compose_call, Behavior, GuidelineConfig, InteractionError, Stage, StageEvent,
};
use crate::planner::{PlanContext, Planner, PlannerError};
use crate::protocol::{AnswerPayload, ErrorCode, HumanToolCall, HumanToolResponse, ResponseOutcome};
use crate::schema::{render_profile_prompt, validate_profile, HumanToolProfile, ProfileConfig};
use crate::store::EventLog;
use crate::taskgraph::{
    Actor, AllocateError, AllocationPolicy, InvocationReason, NodeStatus, RequirementFlag, TaskNode,
};
use crate::Validation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub mode: Mode,
    pub policy: AllocationPolicy,
    pub timeout_default_ms: u64,
    pub max_negotiation_rounds: u32,
    /// Extra decomposition attempts after an invalid tree.
    pub planner_retries: u32,
    pub guidelines: GuidelineConfig,
    pub profile: ProfileConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            mode: Mode::HumanTool,
            policy: AllocationPolicy::default(),
            timeout_default_ms: 300_000,
            max_negotiation_rounds: 2,
            planner_retries: 2,
            guidelines: GuidelineConfig::default(),
            profile: ProfileConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn with_mode(mode: Mode) -> Self {
        Self { mode, ..Self::default() }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid profile: {0}")]
    InvalidProfile(Validation),
    #[error("goal is empty")]
    EmptyGoal,
    #[error("planner failed to produce a valid tree after {attempts} attempts: {last}")]
    Decomposition { attempts: u32, last: String },
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Allocate(#[from] AllocateError),
    #[error(transparent)]
    Interaction(#[from] InteractionError),
    #[error("a human call is pending")]
    CallPending,
    #[error("step requires the during stage, session is in {0}")]
    WrongStage(Stage),
    #[error("session has ended")]
    Ended,
    /// A response rejected at the protocol level; the session state is untouched.
    #[error("response rejected ({code}): {message}")]
    Rejected { code: ErrorCode, message: String },
    #[error("session made no progress after {0} iterations")]
    Stuck(usize),
    #[error("event rejected by the state machine: {0}")]
    Apply(#[from] ApplyError),
}

impl OrchestratorError {
    pub fn rejection_code(&self) -> Option<ErrorCode> {
        match self {
            OrchestratorError::Rejected { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// What one [`Session::step`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StepEvent {
    AiExecuted(String),
    NodeFailed(String),
    CallIssued(String),
    Ended,
}

pub struct Session {
    state: SessionState,
    log: EventLog,
    config: SessionConfig,
}

/// Behavior for a node call, chosen by the primary reason.
pub fn select_behavior(node: &TaskNode, reason: InvocationReason) -> Behavior {
    use RequirementFlag::*;
    match reason {
        InvocationReason::AuthorityControl => Behavior::Approve,
        InvocationReason::InformationExchange => {
            if node.has(NeedsPreferences) || node.has(NeedsPrivateInfo) {
                Behavior::Elicit
            } else {
                Behavior::Probe
            }
        }
        InvocationReason::CapabilityComplementarity => {
            if node.has(NeedsCreativity) || node.has(NeedsComplexJudgment) {
                Behavior::Elicit
            } else {
                Behavior::Guide
            }
        }
    }
}

fn latency_ms(call: &HumanToolCall, at: DateTime<Utc>) -> u64 {
    (at - call.issued_at).num_milliseconds().max(0) as u64
}

impl Session {
    /// Decomposes the goal, allocates every leaf, and opens the session:
    /// a prime call in human-tool mode, straight to `during` in AI-only mode.
    pub fn start(
        session_id: &str,
        profile: HumanToolProfile,
        goal: &str,
        planner: &dyn Planner,
        config: SessionConfig,
        now: DateTime<Utc>,
    ) -> Result<Session, OrchestratorError> {
        validate_profile(&profile, &config.profile).into_result().map_err(OrchestratorError::InvalidProfile)?;
        if goal.trim().is_empty() {
            return Err(OrchestratorError::EmptyGoal);
        }
        let prompt = render_profile_prompt(&profile).map_err(|e| OrchestratorError::InvalidProfile(match e {
            crate::schema::SchemaError::InvalidProfile(v) => v,
            other => {
                let mut v = Validation::default();
                v.push("profile", other.to_string());
                v
            }
        }))?;

        let attempts = config.planner_retries + 1;
        let mut last = String::new();
        let mut tree = None;
        for _ in 0..attempts {
            match planner.decompose(goal, &prompt) {
                Ok(t) => {
                    tree = Some(t);
                    break;
                }
                Err(e @ (PlannerError::Transport(_) | PlannerError::Cancelled)) => return Err(e.into()),
                Err(e) => last = e.to_string(),
            }
        }
        let mut tree = tree.ok_or(OrchestratorError::Decomposition { attempts, last })?;
        tree.allocate_all(&profile, &config.policy)?;

        let header = SessionHeader {
            session_id: session_id.to_string(),
            goal: goal.to_string(),
            profile,
            mode: config.mode,
            policy: config.policy,
            timeout_default_ms: config.timeout_default_ms,
            max_negotiation_rounds: config.max_negotiation_rounds,
            started_at: now,
        };
        let mut opened: Option<SessionState> = None;
        let first = SessionEvent::SessionStarted { header, tree };
        SessionState::apply(&mut opened, &first)?;
        let mut session = Session { state: opened.expect("started"), log: EventLog::default(), config };
        session.log.push(first);

        match session.config.mode {
            Mode::HumanTool => {
                let root = session.state.tree.root().id.clone();
                session.issue_call(planner, Stage::Initial, Behavior::Prime, &root, None, CallPurpose::Prime, now)?;
            }
            Mode::AiOnly => session.change_stage(StageEvent::ContextEstablished, now)?,
        }
        Ok(session)
    }

    /// Rebuilds a live session from a replayed state and its log.
    pub fn resume(state: SessionState, log: EventLog, config: SessionConfig) -> Session {
        Session { state, log, config }
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn session_id(&self) -> &str {
        &self.state.header.session_id
    }

    pub fn pending_call(&self) -> Option<&HumanToolCall> {
        self.state.pending.as_ref().map(|p| &p.call)
    }

    pub fn is_terminal(&self) -> bool {
        self.state.is_terminal()
    }

    fn emit(&mut self, event: SessionEvent) -> Result<(), OrchestratorError> {
        self.state.apply_event(&event)?;
        self.log.push(event);
        Ok(())
    }

    fn change_stage(&mut self, event: StageEvent, now: DateTime<Utc>) -> Result<(), OrchestratorError> {
        let from = self.state.stage;
        let to = crate::interaction::advance_stage(from, event);
        if to != from {
            self.emit(SessionEvent::StageChange { from, to, event, at: now })?;
        }
        Ok(())
    }

    fn mutate(&mut self, m: TreeMutation) -> Result<(), OrchestratorError> {
        self.emit(SessionEvent::TreeMutation(m))
    }

    fn set_status(&mut self, node_id: &str, status: NodeStatus) -> Result<(), OrchestratorError> {
        self.mutate(TreeMutation::Status { node_id: node_id.to_string(), status })
    }

    fn context_for(&self, node_id: &str) -> PlanContext {
        let window = self.config.guidelines.history_window;
        let history = &self.state.message_history;
        PlanContext {
            profile_prompt: render_profile_prompt(&self.state.profile).unwrap_or_default(),
            node_notes: self.state.node_notes.get(node_id).cloned().unwrap_or_default(),
            history: history[history.len().saturating_sub(window)..].to_vec(),
        }
    }

    fn node(&self, node_id: &str) -> TaskNode {
        self.state.tree.get(node_id).expect("node ids come from the tree").clone()
    }

    #[allow(clippy::too_many_arguments)]
    fn issue_call(
        &mut self,
        planner: &dyn Planner,
        stage: Stage,
        behavior: Behavior,
        node_id: &str,
        reason: Option<InvocationReason>,
        purpose: CallPurpose,
        now: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        debug_assert_eq!(self.config.mode, Mode::HumanTool);
        let node = self.node(node_id);
        let context = self.context_for(node_id);
        let text = planner.compose_message(stage, behavior, &node, &context)?;
        let payload = compose_call(behavior, stage, &node, reason, &text)?;
        let guidelines = check_guidelines(&text, Some((stage, behavior)), &context.history, &self.config.guidelines);
        let call = HumanToolCall {
            call_id: format!("{}-c{:04}", self.state.header.session_id, self.state.calls_issued + 1),
            session_id: self.state.header.session_id.clone(),
            node_id: payload.node_id,
            stage: payload.stage,
            behavior: payload.behavior,
            reason: payload.reason,
            prompt_text: payload.prompt_text,
            response_kind: payload.response_kind,
            deadline: now + Duration::milliseconds(self.state.header.timeout_default_ms.max(1) as i64),
            issued_at: now,
        };
        self.emit(SessionEvent::CallIssued { call, purpose, guidelines })
    }

    fn record(
        &mut self,
        node_id: &str,
        call: Option<&HumanToolCall>,
        outcome: RecordOutcome,
        now: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        let latency = match (call, outcome) {
            (Some(c), RecordOutcome::Answered | RecordOutcome::Refused | RecordOutcome::CounterProposal) => {
                Some(latency_ms(c, now))
            }
            _ => None,
        };
        let record = InvocationRecord {
            timestamp: now,
            session_id: self.state.header.session_id.clone(),
            node_id: node_id.to_string(),
            call_id: call.map(|c| c.call_id.clone()),
            stage: call.map_or(self.state.stage, |c| c.stage),
            behavior: call.map(|c| c.behavior),
            reason: call.and_then(|c| c.reason),
            outcome,
            latency_ms: latency,
        };
        self.emit(SessionEvent::Invocation(record))
    }

    /// Runs the planner on an in-progress leaf. Returns whether it succeeded.
    fn execute_ai(&mut self, planner: &dyn Planner, node_id: &str, now: DateTime<Utc>) -> Result<bool, OrchestratorError> {
        let node = self.node(node_id);
        let context = self.context_for(node_id);
        match planner.execute_ai_node(&node, &context) {
            Ok(out) => {
                self.mutate(TreeMutation::Output { node_id: node_id.to_string(), text: out })?;
                self.set_status(node_id, NodeStatus::Done)?;
                self.record(node_id, None, RecordOutcome::AiExecuted, now)?;
                Ok(true)
            }
            Err(PlannerError::Cancelled) => Err(PlannerError::Cancelled.into()),
            Err(_) => {
                self.set_status(node_id, NodeStatus::Failed)?;
                Ok(false)
            }
        }
    }

    /// One unit of progress. Requires the `during` stage and no pending call.
    pub fn step(&mut self, planner: &dyn Planner, now: DateTime<Utc>) -> Result<StepEvent, OrchestratorError> {
        if self.state.pending.is_some() {
            return Err(OrchestratorError::CallPending);
        }
        if self.state.stage == Stage::Ending {
            return Err(OrchestratorError::Ended);
        }
        if self.state.stage != Stage::During {
            return Err(OrchestratorError::WrongStage(self.state.stage));
        }
        let next = self.state.tree.next_executable().map(|n| n.id.clone());
        let Some(node_id) = next else {
            return self.finish(planner, now);
        };
        self.set_status(&node_id, NodeStatus::InProgress)?;
        let allocation = self.state.tree.get(&node_id).and_then(|n| n.allocation.clone());
        let human = allocation.as_ref().filter(|a| a.actor() == Actor::Human);
        match (self.config.mode, human) {
            (Mode::HumanTool, Some(a)) => {
                let reason = a.primary_reason().expect("human allocation has a reason");
                let behavior = select_behavior(&self.node(&node_id), reason);
                self.change_stage(StageEvent::NodeDispatched, now)?;
                self.issue_call(planner, Stage::During, behavior, &node_id, Some(reason), CallPurpose::Node, now)?;
                Ok(StepEvent::CallIssued(node_id))
            }
            _ => {
                if self.execute_ai(planner, &node_id, now)? {
                    return Ok(StepEvent::AiExecuted(node_id));
                }
                self.change_stage(StageEvent::MisunderstandingDetected, now)?;
                match self.config.mode {
                    Mode::HumanTool => self.issue_call(
                        planner,
                        Stage::ErrorHandling,
                        Behavior::Explain,
                        &node_id,
                        None,
                        CallPurpose::Repair { kind: RepairKind::FailedExecution },
                        now,
                    )?,
                    Mode::AiOnly => self.change_stage(StageEvent::RepairAbandoned, now)?,
                }
                Ok(StepEvent::NodeFailed(node_id))
            }
        }
    }

    /// No executable leaf left: close leaves stuck behind a failure, then
    /// issue the closing call (human-tool) or end directly (AI-only).
    fn finish(&mut self, planner: &dyn Planner, now: DateTime<Utc>) -> Result<StepEvent, OrchestratorError> {
        let blocked: Vec<String> = self
            .state
            .tree
            .leaves()
            .into_iter()
            .filter(|l| l.status == NodeStatus::Pending)
            .map(|l| l.id.clone())
            .collect();
        for id in blocked {
            self.set_status(&id, NodeStatus::InProgress)?;
            self.mutate(TreeMutation::Note { node_id: id.clone(), text: "skipped: blocked by a failed predecessor".into() })?;
            self.set_status(&id, NodeStatus::Skipped)?;
        }
        if self.config.mode == Mode::HumanTool && !self.state.closing_issued {
            let root = self.state.tree.root().id.clone();
            self.issue_call(planner, Stage::Ending, Behavior::Reflect, &root, None, CallPurpose::Closing, now)?;
            return Ok(StepEvent::CallIssued(root));
        }
        self.change_stage(StageEvent::AllNodesTerminal, now)?;
        Ok(StepEvent::Ended)
    }

    /// Steps until a call is pending or the session ends.
    pub fn advance(&mut self, planner: &dyn Planner, now: DateTime<Utc>) -> Result<Vec<StepEvent>, OrchestratorError> {
        let mut out = Vec::new();
        while self.state.pending.is_none() && self.state.stage == Stage::During {
            out.push(self.step(planner, now)?);
        }
        Ok(out)
    }

    fn reject(&mut self, code: ErrorCode, message: String, call_id: &str, now: DateTime<Utc>) -> OrchestratorError {
        let logged = self.emit(SessionEvent::WireError {
            code: code.code(),
            message: message.clone(),
            call_id: Some(call_id.to_string()),
            at: now,
        });
        match logged {
            Ok(()) => OrchestratorError::Rejected { code, message },
            Err(e) => e,
        }
    }

    /// Integrates a human response to the pending call.
    pub fn deliver_response(
        &mut self,
        response: HumanToolResponse,
        planner: &dyn Planner,
        now: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        let call_id = response.call_id.clone();
        let pending = match &self.state.pending {
            Some(p) if p.call.call_id == call_id => p.clone(),
            _ => {
                let (code, msg) = match self.state.closed_calls.get(&call_id) {
                    Some(c) if c.outcome == RecordOutcome::TimedOut || response.received_at > c.deadline => {
                        (ErrorCode::PastDeadline, format!("call `{call_id}` is past its deadline"))
                    }
                    Some(_) => (ErrorCode::DuplicateResponse, format!("call `{call_id}` already has a response")),
                    None => (ErrorCode::UnknownCall, format!("no call `{call_id}`")),
                };
                return Err(self.reject(code, msg, &call_id, now));
            }
        };
        if response.received_at > pending.call.deadline {
            self.apply_timeout(planner, pending.call.deadline.max(now))?;
            return Err(self.reject(
                ErrorCode::PastDeadline,
                format!("response to `{call_id}` arrived after the deadline"),
                &call_id,
                now,
            ));
        }
        match &response.outcome {
            ResponseOutcome::TimedOut {} => {
                return Err(self.reject(
                    ErrorCode::InvalidMessage,
                    "timed_out is produced by the orchestrator clock only".into(),
                    &call_id,
                    now,
                ))
            }
            ResponseOutcome::Answered { payload } if !payload.matches(&pending.call.response_kind) => {
                return Err(self.reject(
                    ErrorCode::InvalidMessage,
                    format!("payload does not match response kind {}", pending.call.response_kind.name()),
                    &call_id,
                    now,
                ))
            }
            _ => {}
        }
        let at = response.received_at;
        self.integrate(planner, &pending, response.outcome, at)
    }

    /// Deadline clock: times out the pending call once `now` is past its deadline.
    pub fn tick(&mut self, planner: &dyn Planner, now: DateTime<Utc>) -> Result<bool, OrchestratorError> {
        match &self.state.pending {
            Some(p) if now > p.call.deadline => {
                self.apply_timeout(planner, now)?;
                Ok(true)
            }
            _ => Ok(false),
        }
    }

    fn apply_timeout(&mut self, planner: &dyn Planner, now: DateTime<Utc>) -> Result<(), OrchestratorError> {
        let pending = self.state.pending.clone().expect("timeout needs a pending call");
        self.integrate(planner, &pending, ResponseOutcome::TimedOut {}, now)
    }

    /// Ends the session: a pending call is closed as timed out, then the
    /// stage moves to `ending` on `session_aborted`.
    pub fn abort(&mut self, now: DateTime<Utc>) -> Result<(), OrchestratorError> {
        if self.is_terminal() {
            return Ok(());
        }
        if let Some(p) = self.state.pending.clone() {
            self.record(&p.call.node_id, Some(&p.call), RecordOutcome::TimedOut, now)?;
        }
        self.change_stage(StageEvent::SessionAborted, now)
    }

    fn integrate(
        &mut self,
        planner: &dyn Planner,
        pending: &PendingCall,
        outcome: ResponseOutcome,
        at: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        let call = &pending.call;
        let node_id = call.node_id.clone();
        let kind = match &outcome {
            ResponseOutcome::Answered { .. } => RecordOutcome::Answered,
            ResponseOutcome::Refused { .. } => RecordOutcome::Refused,
            ResponseOutcome::CounterProposal { .. } => RecordOutcome::CounterProposal,
            ResponseOutcome::TimedOut {} => RecordOutcome::TimedOut,
        };
        let can_negotiate = self.state.rounds_used(&node_id) < self.state.header.max_negotiation_rounds;
        self.record(&node_id, Some(call), kind, at)?;

        match pending.purpose {
            CallPurpose::Prime => {
                if let Some(text) = note_text(&outcome, call) {
                    self.mutate(TreeMutation::Note { node_id: node_id.clone(), text })?;
                }
                self.change_stage(StageEvent::ContextEstablished, at)?;
                if matches!(outcome, ResponseOutcome::Refused { .. }) {
                    self.change_stage(StageEvent::RefusalReceived, at)?;
                    self.issue_call(
                        planner,
                        Stage::ErrorHandling,
                        Behavior::Explain,
                        &node_id,
                        None,
                        CallPurpose::Repair { kind: RepairKind::Session },
                        at,
                    )?;
                }
            }
            CallPurpose::Closing => {
                if let Some(text) = note_text(&outcome, call) {
                    self.mutate(TreeMutation::Note { node_id: node_id.clone(), text })?;
                }
                self.change_stage(StageEvent::AllNodesTerminal, at)?;
            }
            CallPurpose::Node => match outcome {
                ResponseOutcome::Answered { payload } => self.accept_answer(&node_id, call, &payload)?,
                ResponseOutcome::Refused { .. } => self.on_refusal(planner, &node_id, call, at)?,
                ResponseOutcome::CounterProposal { proposal_text } if can_negotiate => {
                    self.negotiate(planner, &node_id, &proposal_text, at)?
                }
                ResponseOutcome::CounterProposal { .. } => self.on_refusal(planner, &node_id, call, at)?,
                ResponseOutcome::TimedOut {} => self.fallback(planner, &node_id, at)?,
            },
            CallPurpose::Repair { kind: RepairKind::Refusal } => match outcome {
                ResponseOutcome::Answered { payload } => {
                    self.accept_answer(&node_id, call, &payload)?;
                    self.change_stage(StageEvent::Repaired, at)?;
                }
                ResponseOutcome::CounterProposal { proposal_text } if can_negotiate => {
                    self.negotiate(planner, &node_id, &proposal_text, at)?;
                    self.change_stage(StageEvent::Repaired, at)?;
                }
                ResponseOutcome::Refused { .. } | ResponseOutcome::CounterProposal { .. } => {
                    self.give_up(&node_id)?;
                    self.change_stage(StageEvent::RepairAbandoned, at)?;
                }
                ResponseOutcome::TimedOut {} => {
                    self.fallback(planner, &node_id, at)?;
                    self.change_stage(StageEvent::RepairAbandoned, at)?;
                }
            },
            CallPurpose::Repair { kind: RepairKind::FailedExecution } => match outcome {
                ResponseOutcome::Answered { payload } => {
                    let text = payload.as_text(&call.response_kind);
                    self.mutate(TreeMutation::Note { node_id: node_id.clone(), text })?;
                    self.set_status(&node_id, NodeStatus::InProgress)?;
                    let event = if self.execute_ai(planner, &node_id, at)? {
                        StageEvent::Repaired
                    } else {
                        StageEvent::RepairAbandoned
                    };
                    self.change_stage(event, at)?;
                }
                _ => self.change_stage(StageEvent::RepairAbandoned, at)?,
            },
            CallPurpose::Repair { kind: RepairKind::Session } => {
                if let Some(text) = note_text(&outcome, call) {
                    self.mutate(TreeMutation::Note { node_id: node_id.clone(), text })?;
                }
                let event = if matches!(outcome, ResponseOutcome::Answered { .. }) {
                    StageEvent::Repaired
                } else {
                    StageEvent::RepairAbandoned
                };
                self.change_stage(event, at)?;
            }
        }
        Ok(())
    }

    fn accept_answer(&mut self, node_id: &str, call: &HumanToolCall, payload: &AnswerPayload) -> Result<(), OrchestratorError> {
        let text = payload.as_text(&call.response_kind);
        self.mutate(TreeMutation::Note { node_id: node_id.to_string(), text: text.clone() })?;
        if *payload == AnswerPayload::Approval(false) {
            return self.set_status(node_id, NodeStatus::Skipped);
        }
        let about_preferences = self.node(node_id).has(RequirementFlag::NeedsPreferences);
        if matches!(call.behavior, Behavior::Configure | Behavior::Elicit) && about_preferences {
            if let Some(text) = self.fit_preference_note(&text) {
                self.mutate(TreeMutation::PreferenceNotes { text })?;
            }
        }
        self.mutate(TreeMutation::Output { node_id: node_id.to_string(), text })?;
        self.set_status(node_id, NodeStatus::Done)
    }

    /// Truncates a note so the profile stays within the configured cap.
    fn fit_preference_note(&self, text: &str) -> Option<String> {
        let used = self.state.profile.preference_notes.chars().count();
        let sep = usize::from(used > 0);
        let room = self.config.profile.max_preference_notes.saturating_sub(used + sep);
        let fitted: String = text.chars().take(room).collect();
        (!fitted.is_empty()).then_some(fitted)
    }

    fn on_refusal(
        &mut self,
        planner: &dyn Planner,
        node_id: &str,
        call: &HumanToolCall,
        at: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        self.change_stage(StageEvent::RefusalReceived, at)?;
        if self.state.refusals_of(node_id) >= 2 {
            self.give_up(node_id)?;
            return self.change_stage(StageEvent::RepairAbandoned, at);
        }
        self.issue_call(
            planner,
            Stage::ErrorHandling,
            Behavior::Explain,
            node_id,
            call.reason,
            CallPurpose::Repair { kind: RepairKind::Refusal },
            at,
        )
    }

    /// Replaces the node's subtree with the planner's revision.
    fn negotiate(
        &mut self,
        planner: &dyn Planner,
        node_id: &str,
        proposal: &str,
        at: DateTime<Utc>,
    ) -> Result<(), OrchestratorError> {
        let _ = at;
        let node = self.node(node_id);
        let context = self.context_for(node_id);
        let revised = planner.replan(&node, proposal, &context).and_then(|mut t| {
            t.allocate_all(&self.state.profile, &self.state.header.policy)
                .map_err(|e| PlannerError::InvalidPlan(e.to_string()))?;
            Ok(t)
        });
        match revised {
            Ok(subtree) => {
                let mutation = TreeMutation::ReplaceSubtree { node_id: node_id.to_string(), subtree };
                match self.mutate(mutation) {
                    Ok(()) => Ok(()),
                    Err(OrchestratorError::Apply(ApplyError::Tree(_))) => self.set_status(node_id, NodeStatus::Failed),
                    Err(e) => Err(e),
                }
            }
            Err(PlannerError::Cancelled) => Err(PlannerError::Cancelled.into()),
            Err(_) => self.set_status(node_id, NodeStatus::Failed),
        }
    }

    /// Abandons a refused node. Authority nodes fail for good; others are skipped.
    fn give_up(&mut self, node_id: &str) -> Result<(), OrchestratorError> {
        let status = if self.is_authority(node_id) { NodeStatus::Failed } else { NodeStatus::Skipped };
        self.set_status(node_id, status)
    }

    fn is_authority(&self, node_id: &str) -> bool {
        self.state
            .tree
            .get(node_id)
            .and_then(|n| n.allocation.as_ref())
            .is_some_and(|a| a.has_reason(InvocationReason::AuthorityControl))
    }

    /// Timeout policy: authority nodes fail, everything else falls back to the AI.
    fn fallback(&mut self, planner: &dyn Planner, node_id: &str, at: DateTime<Utc>) -> Result<(), OrchestratorError> {
        if self.is_authority(node_id) {
            return self.set_status(node_id, NodeStatus::Failed);
        }
        self.execute_ai(planner, node_id, at).map(|_| ())
    }
}

fn note_text(outcome: &ResponseOutcome, call: &HumanToolCall) -> Option<String> {
    match outcome {
        ResponseOutcome::Answered { payload } => Some(payload.as_text(&call.response_kind)),
        ResponseOutcome::CounterProposal { proposal_text } => Some(proposal_text.clone()),
        _ => None,
    }
}

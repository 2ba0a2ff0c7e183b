//! Randomized scenarios: trees, profiles and scripted humans drawn from a
//! seeded ChaCha stream, plus the per-run invariant checks.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, TimeZone, Utc};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::orchestrator::{
    run_to_completion, Mode, OrchestratorError, ResponseScript, ScriptRule, ScriptStep, Session, SessionConfig,
    SessionEvent, SessionSummary,
};
use crate::planner::{ScriptedPlan, ScriptedPlanner};
use crate::schema::{Authority, Capabilities, DimensionScore, Domain, HumanToolProfile, Information};
use crate::store::replay_log;
use crate::taskgraph::{RequirementFlag, TaskNode, TaskTree};

/// A complete offline session setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub goal: String,
    pub profile: HumanToolProfile,
    pub plan: ScriptedPlan,
    pub responses: ResponseScript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimParams {
    /// Levels including the root.
    pub max_depth: usize,
    pub max_leaves: usize,
    /// Percent chance that an AI execution fails.
    pub ai_failure_pct: u32,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { max_depth: 4, max_leaves: 15, ai_failure_pct: 10 }
    }
}

/// Fixed clock origin so generated runs are reproducible.
pub fn epoch() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2025, 1, 1, 9, 0, 0).unwrap()
}

fn score(rng: &mut ChaCha8Rng) -> DimensionScore {
    DimensionScore::new(rng.random_range(1..=5)).expect("in range")
}

pub fn random_profile(rng: &mut ChaCha8Rng, human_id: &str) -> HumanToolProfile {
    HumanToolProfile {
        human_id: human_id.to_string(),
        domain: *[Domain::TravelPlanning, Domain::StoryWriting, Domain::Generic].choose(rng).expect("non-empty"),
        capabilities: Capabilities {
            cognitive_creativity: score(rng),
            specialized_skill: score(rng),
            external_interaction: score(rng),
        },
        information: Information {
            domain_expertise: score(rng),
            private_information: score(rng),
            preference_clarity: score(rng),
        },
        authority: Authority { delegation_level: score(rng), authorization_level: score(rng) },
        preference_notes: String::new(),
    }
}

fn random_flags(rng: &mut ChaCha8Rng) -> BTreeSet<RequirementFlag> {
    // Sparse: most leaves carry zero to two flags.
    RequirementFlag::ALL.iter().copied().filter(|_| rng.random_bool(0.18)).collect()
}

/// Random tree with at most `max_depth` levels and `max_leaves` leaves.
pub fn random_tree(rng: &mut ChaCha8Rng, params: &SimParams) -> TaskTree {
    let mut nodes = Vec::new();
    let mut leaves = 0usize;
    let mut counter = 0usize;
    grow(rng, params, 1, &mut leaves, &mut counter, &mut nodes);
    TaskTree::new(nodes).expect("generator builds valid trees")
}

fn grow(
    rng: &mut ChaCha8Rng,
    params: &SimParams,
    depth: usize,
    leaves: &mut usize,
    counter: &mut usize,
    nodes: &mut Vec<TaskNode>,
) -> String {
    let id = format!("n{}", *counter);
    *counter += 1;
    let room = params.max_leaves.saturating_sub(*leaves);
    let branch = depth < params.max_depth && room >= 2 && (depth == 1 || rng.random_bool(0.45));
    if !branch {
        *leaves += 1;
        nodes.push(TaskNode::leaf(&id, &format!("task {id}"), random_flags(rng)));
        return id;
    }
    let at = nodes.len();
    nodes.push(TaskNode::branch(&id, &format!("task {id}"), &[]));
    let wanted = rng.random_range(2..=4usize);
    let mut children = Vec::new();
    for _ in 0..wanted {
        if params.max_leaves.saturating_sub(*leaves) == 0 {
            break;
        }
        children.push(grow(rng, params, depth + 1, leaves, counter, nodes));
    }
    nodes[at].children = children;
    id
}

fn random_step(rng: &mut ChaCha8Rng) -> ScriptStep {
    match rng.random_range(0..100) {
        0..=54 => ScriptStep::Answer { text: None, approve: Some(rng.random_bool(0.85)), choice: None },
        55..=69 => ScriptStep::refuse("not now"),
        70..=84 => ScriptStep::counter("let's split this differently"),
        _ => ScriptStep::NoResponse,
    }
}

/// Each node gets its own short reply sequence; anything unmatched is answered.
pub fn random_script(rng: &mut ChaCha8Rng, tree: &TaskTree) -> ResponseScript {
    let mut script = ResponseScript::default();
    script.latency_ms = rng.random_range(500..5_000);
    for node in tree.nodes() {
        let n = rng.random_range(1..=3);
        let replies = (0..n).map(|_| random_step(rng)).collect();
        script = script.rule(ScriptRule { node_id: Some(node.id.clone()), behavior: None, replies, latency_ms: None });
    }
    script
}

pub fn random_scenario(seed: u64, params: &SimParams) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tree = random_tree(&mut rng, params);
    let profile = random_profile(&mut rng, &format!("h{seed}"));
    let goal = format!("random goal {seed}");
    let mut plan = ScriptedPlan::new(&goal, tree.clone()).with_all_outputs();
    plan.failing_nodes =
        tree.leaves().into_iter().filter(|_| rng.random_range(0..100) < params.ai_failure_pct).map(|l| l.id.clone()).collect();
    let responses = random_script(&mut rng, &tree);
    Scenario { goal, profile, plan, responses }
}

/// What one run produced and whether its invariants held.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub summary: SessionSummary,
    pub events: usize,
    pub replay_hash: Option<String>,
    /// Human-readable invariant failures; empty when all hold.
    pub violations: Vec<String>,
}

impl RunOutcome {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn run_scenario(
    session_id: &str,
    scenario: &Scenario,
    config: SessionConfig,
) -> Result<(Session, SessionSummary), OrchestratorError> {
    let planner = ScriptedPlanner::new(scenario.plan.clone());
    let mut session = Session::start(session_id, scenario.profile.clone(), &scenario.goal, &planner, config, epoch())?;
    let mut responses = scenario.responses.clone();
    let summary = run_to_completion(&mut session, &planner, &mut responses, epoch())?;
    Ok((session, summary))
}

/// Runs the scenario and checks the per-session invariants: one pending
/// call at a time, every call closed exactly once, terminal stage reached,
/// replay reproduces the live state, and ai-only mode never calls the human.
pub fn run_checked(session_id: &str, scenario: &Scenario, mode: Mode) -> Result<RunOutcome, OrchestratorError> {
    let (session, summary) = run_scenario(session_id, scenario, SessionConfig::with_mode(mode))?;
    let mut violations = Vec::new();
    let mut open: Option<String> = None;
    let mut closed: BTreeMap<String, usize> = BTreeMap::new();
    let mut issued = 0usize;
    for event in session.log().events() {
        match event {
            SessionEvent::CallIssued { call, .. } => {
                issued += 1;
                if let Some(prev) = &open {
                    violations.push(format!("call {} issued while {prev} pending", call.call_id));
                }
                open = Some(call.call_id.clone());
            }
            SessionEvent::Invocation(r) => {
                if let Some(id) = &r.call_id {
                    *closed.entry(id.clone()).or_default() += 1;
                    if open.as_deref() == Some(id.as_str()) {
                        open = None;
                    } else {
                        violations.push(format!("outcome for {id} which was not pending"));
                    }
                }
            }
            _ => {}
        }
    }
    if let Some(id) = open {
        violations.push(format!("call {id} never reached an outcome"));
    }
    if closed.len() != issued || closed.values().any(|n| *n != 1) {
        violations.push(format!("{issued} calls issued, {} closed, counts {:?}", closed.len(), closed));
    }
    if !session.is_terminal() {
        violations.push("session did not reach ending".into());
    }
    if mode == Mode::AiOnly && issued > 0 {
        violations.push(format!("ai-only mode issued {issued} human calls"));
    }
    let replay_hash = match replay_log(session.log()) {
        Ok(Some(state)) => Some(state.state_hash()),
        Ok(None) => None,
        Err(e) => {
            violations.push(format!("replay failed: {e}"));
            None
        }
    };
    if replay_hash.as_deref() != Some(summary.state_hash.as_str()) {
        violations.push("replayed state hash differs from the live one".into());
    }
    Ok(RunOutcome { summary, events: session.log().len(), replay_hash, violations })
}

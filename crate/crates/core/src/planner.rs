//! The intelligence boundary. A [`Planner`] decomposes goals into flagged
//! task trees, executes AI-allocated leaves, writes the text of each human
//! call, and replans a subtree after a counter-proposal. Planners return
//! values only; the orchestrator owns all session state.
//!
//! [`ScriptedPlanner`] is deterministic and drives every test.
//! [`LlmPlanner`] talks to an OpenAI-style chat-completion endpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::interaction::{check_guidelines, is_allowed, Behavior, GuidelineConfig, GuidelineVerdict, Stage, DISCLOSURE_MARKER};
use crate::taskgraph::{NodeStatus, TaskNode, TaskTree};

pub const DECOMPOSITION_TEMPLATE: &str = include_str!("../templates/decomposition_v1.txt");
pub const COMMUNICATION_TEMPLATE: &str = include_str!("../templates/communication_v1.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PlannerError {
    #[error("goal `{0}` does not match the scripted plan")]
    UnmatchedGoal(String),
    #[error("no template for ({stage}, {behavior})")]
    MissingTemplate { stage: Stage, behavior: Behavior },
    #[error("behavior {behavior} is not legal in stage {stage}")]
    IllegalPair { stage: Stage, behavior: Behavior },
    #[error("execution of node `{0}` failed")]
    ExecutionFailed(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("model output rejected after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("model returned an empty message")]
    EmptyOutput,
    #[error("request cancelled")]
    Cancelled,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
}

/// What the planner may see when writing a message or executing a node.
#[derive(Debug, Clone, Default)]
pub struct PlanContext {
    pub profile_prompt: String,
    /// Human answers and AI outputs already attached to the node.
    pub node_notes: Vec<String>,
    /// Recent outgoing messages, oldest first.
    pub history: Vec<String>,
}

pub trait Planner: Send + Sync {
    fn decompose(&self, goal: &str, profile_prompt: &str) -> Result<TaskTree, PlannerError>;

    fn execute_ai_node(&self, node: &TaskNode, context: &PlanContext) -> Result<String, PlannerError>;

    fn compose_message(
        &self,
        stage: Stage,
        behavior: Behavior,
        node: &TaskNode,
        context: &PlanContext,
    ) -> Result<String, PlannerError>;

    /// Returns a subtree rooted at `node.id` that replaces the node.
    fn replan(&self, node: &TaskNode, proposal: &str, context: &PlanContext) -> Result<TaskTree, PlannerError>;

    /// Aborts in-flight and future requests.
    fn cancel(&self) {}
}

fn template_key(stage: Stage, behavior: Behavior) -> String {
    format!("{}/{}", stage.as_str(), behavior.as_str())
}

/// Deterministic test double: a fixed tree, fixed outputs, fixed messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedPlan {
    pub goal_pattern: String,
    pub tree: TaskTree,
    #[serde(default)]
    pub node_outputs: BTreeMap<String, String>,
    /// Keyed `stage/behavior`, e.g. `during/elicit`. Placeholders:
    /// `{node_id}`, `{description}`, `{marker}`. Absent means the defaults.
    #[serde(default = "ScriptedPlan::default_templates")]
    pub message_templates: BTreeMap<String, String>,
    /// Replacement subtrees for counter-proposals, keyed by node id.
    #[serde(default)]
    pub replans: BTreeMap<String, TaskTree>,
    /// Nodes whose AI execution fails.
    #[serde(default)]
    pub failing_nodes: BTreeSet<String>,
}

impl ScriptedPlan {
    pub fn new(goal: &str, tree: TaskTree) -> Self {
        Self {
            goal_pattern: goal.to_string(),
            tree,
            node_outputs: BTreeMap::new(),
            message_templates: Self::default_templates(),
            replans: BTreeMap::new(),
            failing_nodes: BTreeSet::new(),
        }
    }

    /// A template for every legal (stage, behavior) pair.
    pub fn default_templates() -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for stage in Stage::ALL {
            for behavior in crate::interaction::allowed_behaviors(stage) {
                let text = match (stage, behavior) {
                    (Stage::Initial, Behavior::Prime) => {
                        "Let's get started on: {description}. {marker} I can research, draft and organize; \
                         decisions that need your knowledge, preferences or authorization stay with you."
                            .to_string()
                    }
                    (Stage::Ending, Behavior::Reflect) => {
                        "We have finished: {description}. Here is how your input shaped the result. Anything to add?"
                            .to_string()
                    }
                    (_, b) => format!("[{}] {{description}} ({{node_id}}): {}.", b.label(), b.definition()),
                };
                out.insert(template_key(stage, behavior), text);
            }
        }
        out
    }

    /// Every AI-allocated leaf must have an output.
    pub fn validate_outputs(&self, allocated: &TaskTree) -> Result<(), PlannerError> {
        for leaf in allocated.leaves() {
            let ai = leaf.allocation.as_ref().map_or(false, |a| a.actor() == crate::taskgraph::Actor::Ai);
            if ai && !self.node_outputs.contains_key(&leaf.id) {
                return Err(PlannerError::InvalidPlan(format!("AI leaf `{}` has no scripted output", leaf.id)));
            }
        }
        Ok(())
    }

    pub fn with_all_outputs(mut self) -> Self {
        for leaf in self.tree.leaves() {
            self.node_outputs.entry(leaf.id.clone()).or_insert_with(|| format!("output of {}", leaf.id));
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct ScriptedPlanner {
    plan: ScriptedPlan,
}

impl ScriptedPlanner {
    pub fn new(plan: ScriptedPlan) -> Self {
        Self { plan }
    }

    pub fn plan(&self) -> &ScriptedPlan {
        &self.plan
    }
}

pub fn scripted_decompose(goal: &str, _profile_prompt: &str, plan: &ScriptedPlan) -> Result<TaskTree, PlannerError> {
    if goal != plan.goal_pattern {
        return Err(PlannerError::UnmatchedGoal(goal.to_string()));
    }
    let mut tree = plan.tree.clone();
    tree.clear_allocations();
    Ok(tree)
}

fn fill(template: &str, node: &TaskNode) -> String {
    template
        .replace("{node_id}", &node.id)
        .replace("{description}", &node.description)
        .replace("{marker}", DISCLOSURE_MARKER)
}

impl Planner for ScriptedPlanner {
    fn decompose(&self, goal: &str, profile_prompt: &str) -> Result<TaskTree, PlannerError> {
        scripted_decompose(goal, profile_prompt, &self.plan)
    }

    fn execute_ai_node(&self, node: &TaskNode, _context: &PlanContext) -> Result<String, PlannerError> {
        if self.plan.failing_nodes.contains(&node.id) {
            return Err(PlannerError::ExecutionFailed(node.id.clone()));
        }
        Ok(self.plan.node_outputs.get(&node.id).cloned().unwrap_or_else(|| format!("completed: {}", node.description)))
    }

    fn compose_message(
        &self,
        stage: Stage,
        behavior: Behavior,
        node: &TaskNode,
        _context: &PlanContext,
    ) -> Result<String, PlannerError> {
        if !is_allowed(stage, behavior) {
            return Err(PlannerError::IllegalPair { stage, behavior });
        }
        let template = self
            .plan
            .message_templates
            .get(&template_key(stage, behavior))
            .ok_or(PlannerError::MissingTemplate { stage, behavior })?;
        Ok(fill(template, node))
    }

    fn replan(&self, node: &TaskNode, proposal: &str, _context: &PlanContext) -> Result<TaskTree, PlannerError> {
        if let Some(t) = self.plan.replans.get(&node.id) {
            let mut t = t.clone();
            t.clear_allocations();
            return Ok(t);
        }
        let mut leaf = TaskNode::leaf(&node.id, &format!("{} (revised: {proposal})", node.description), []);
        leaf.requirement_flags = node.requirement_flags.clone();
        TaskTree::new(vec![leaf]).map_err(|e| PlannerError::InvalidPlan(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    pub api_key_env_var_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
}

fn default_retries() -> u32 {
    2
}

fn default_timeout_secs() -> u64 {
    60
}

impl LlmEndpointConfig {
    pub fn new(base_url: &str, model_name: &str, api_key_env_var_name: &str) -> Self {
        Self {
            base_url: base_url.to_string(),
            model_name: model_name.to_string(),
            api_key_env_var_name: api_key_env_var_name.to_string(),
            temperature: 0.0,
            max_retries: default_retries(),
            request_timeout_secs: default_timeout_secs(),
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(PlannerError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if self.base_url.is_empty() || self.model_name.is_empty() {
            return Err(PlannerError::Config("base_url and model_name are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ChatMessage {
    role: String,
    content: String,
}

impl ChatMessage {
    fn new(role: &str, content: impl Into<String>) -> Self {
        Self { role: role.to_string(), content: content.into() }
    }
}

/// Chat-completion planner. Credentials come only from the configured
/// environment variable.
pub struct LlmPlanner {
    config: LlmEndpointConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    cancelled: AtomicBool,
    guidelines: GuidelineConfig,
}

impl LlmPlanner {
    pub fn new(config: LlmEndpointConfig) -> Result<Self, PlannerError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| PlannerError::Transport(e.to_string()))?;
        let api_key = std::env::var(&config.api_key_env_var_name).ok();
        Ok(Self { config, client, api_key, cancelled: AtomicBool::new(false), guidelines: GuidelineConfig::default() })
    }

    fn chat(&self, messages: &[ChatMessage]) -> Result<String, PlannerError> {
        if self.cancelled.load(Ordering::SeqCst) {
            return Err(PlannerError::Cancelled);
        }
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model_name,
            "temperature": self.config.temperature,
            "messages": messages,
        });
        let mut req = self.client.post(url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| PlannerError::Transport(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(PlannerError::Transport(format!("endpoint returned HTTP {status}")));
        }
        let value: Value = resp.json().map_err(|e| PlannerError::Transport(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| PlannerError::Transport("response has no choices[0].message.content".into()))
    }

    /// Sends `messages`, parses with `parse`, and on rejection re-prompts
    /// with the parser's error up to `max_retries` times.
    fn chat_parsed<T>(
        &self,
        mut messages: Vec<ChatMessage>,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, PlannerError> {
        let attempts = self.config.max_retries + 1;
        let mut last_error = String::new();
        for attempt in 0..attempts {
            let reply = self.chat(&messages)?;
            match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) => {
                    last_error = e;
                    if attempt + 1 < attempts {
                        messages.push(ChatMessage::new("assistant", reply));
                        messages.push(ChatMessage::new(
                            "user",
                            format!("Your reply was rejected by the validator: {last_error}\nReply again with corrected strict JSON only."),
                        ));
                    }
                }
            }
        }
        Err(PlannerError::RetriesExhausted { attempts, last_error })
    }
}

/// Pulls the outermost JSON object out of a reply that may be fenced.
fn extract_json(reply: &str) -> Option<&str> {
    let start = reply.find('{')?;
    let end = reply.rfind('}')?;
    (end > start).then(|| &reply[start..=end])
}

/// Parses a model-emitted tree: statuses reset to pending, allocations dropped.
pub fn parse_tree_reply(reply: &str) -> Result<TaskTree, String> {
    #[derive(Deserialize)]
    struct Repr {
        nodes: Vec<TaskNode>,
    }
    let text = extract_json(reply).ok_or("no JSON object in reply")?;
    let repr: Repr = serde_json::from_str(text).map_err(|e| format!("schema error: {e}"))?;
    let nodes = repr
        .nodes
        .into_iter()
        .map(|mut n| {
            n.status = NodeStatus::Pending;
            n.allocation = None;
            n
        })
        .collect();
    TaskTree::new(nodes).map_err(|e| e.to_string())
}

fn fill_communication(stage: Stage, behavior: Behavior, node: &TaskNode, history: &[String]) -> String {
    let history = if history.is_empty() {
        "(none)".to_string()
    } else {
        history.iter().map(|h| format!("- {h}")).collect::<Vec<_>>().join("\n")
    };
    COMMUNICATION_TEMPLATE
        .replace("{stage}", stage.as_str())
        .replace("{behavior_definition}", behavior.definition())
        .replace("{behavior}", behavior.as_str())
        .replace("{node_description}", &node.description)
        .replace("{history}", &history)
}

impl Planner for LlmPlanner {
    fn decompose(&self, goal: &str, profile_prompt: &str) -> Result<TaskTree, PlannerError> {
        let messages = vec![
            ChatMessage::new("system", format!("{profile_prompt}\n\n{DECOMPOSITION_TEMPLATE}")),
            ChatMessage::new("user", goal),
        ];
        self.chat_parsed(messages, parse_tree_reply)
    }

    fn execute_ai_node(&self, node: &TaskNode, context: &PlanContext) -> Result<String, PlannerError> {
        let mut user = format!("Complete this subtask and reply with the result only.\nSubtask: {}", node.description);
        if !context.node_notes.is_empty() {
            user.push_str("\nInput from the human:\n");
            user.push_str(&context.node_notes.join("\n"));
        }
        let messages = vec![ChatMessage::new("system", context.profile_prompt.clone()), ChatMessage::new("user", user)];
        let out = self.chat(&messages)?;
        if out.trim().is_empty() {
            return Err(PlannerError::ExecutionFailed(node.id.clone()));
        }
        Ok(out)
    }

    fn compose_message(
        &self,
        stage: Stage,
        behavior: Behavior,
        node: &TaskNode,
        context: &PlanContext,
    ) -> Result<String, PlannerError> {
        if !is_allowed(stage, behavior) {
            return Err(PlannerError::IllegalPair { stage, behavior });
        }
        let mut messages = vec![
            ChatMessage::new("system", context.profile_prompt.clone()),
            ChatMessage::new("user", fill_communication(stage, behavior, node, &context.history)),
        ];
        let mut text = self.chat(&messages)?.trim().to_string();
        let report = check_guidelines(&text, Some((stage, behavior)), &context.history, &self.guidelines);
        if matches!(report.avoidance, GuidelineVerdict::Violation(_)) {
            messages.push(ChatMessage::new("assistant", text.clone()));
            messages.push(ChatMessage::new("user", "That repeats an earlier message. Say it differently, briefly."));
            text = self.chat(&messages)?.trim().to_string();
        }
        if text.is_empty() {
            return Err(PlannerError::EmptyOutput);
        }
        if stage == Stage::Initial && behavior == Behavior::Prime && !text.contains(DISCLOSURE_MARKER) {
            text.push_str(&format!(
                "\n\n{DISCLOSURE_MARKER} I plan, research and draft; decisions that need your knowledge, \
                 preferences or authorization stay with you."
            ));
        }
        Ok(text)
    }

    fn replan(&self, node: &TaskNode, proposal: &str, context: &PlanContext) -> Result<TaskTree, PlannerError> {
        let user = format!(
            "The human made a counter-proposal for subtask `{}` ({}): {proposal}\n\
             Re-plan this subtask. The root node of your tree must have id \"{}\".",
            node.id, node.description, node.id
        );
        let messages = vec![
            ChatMessage::new("system", format!("{}\n\n{DECOMPOSITION_TEMPLATE}", context.profile_prompt)),
            ChatMessage::new("user", user),
        ];
        let root = node.id.clone();
        self.chat_parsed(messages, move |reply| {
            let tree = parse_tree_reply(reply)?;
            if tree.root().id != root {
                return Err(format!("root id must be `{root}`"));
            }
            Ok(tree)
        })
    }

    fn cancel(&self) {
        self.cancelled.store(true, Ordering::SeqCst);
    }
}

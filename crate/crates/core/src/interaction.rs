//! Staged communication: which behaviors are legal in which stage, how
//! events move the stage, how a call payload is composed, and the
//! mechanical checks for the communication guidelines.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::taskgraph::{InvocationReason, TaskNode};

pub const TABLES_VERSION: &str = "humantool-tables/1";

/// Line that opening (prime) messages must carry to disclose what the AI
/// can and cannot do.
pub const DISCLOSURE_MARKER: &str = "What I can and cannot do:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Initial,
    During,
    ErrorHandling,
    Ending,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Initial, Stage::During, Stage::ErrorHandling, Stage::Ending];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Initial => "initial",
            Stage::During => "during",
            Stage::ErrorHandling => "error_handling",
            Stage::Ending => "ending",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Prime,
    Configure,
    Probe,
    Cue,
    Elicit,
    Augment,
    Guide,
    Explain,
    Correct,
    Critique,
    Reflect,
    Approve,
}

impl Behavior {
    pub const ALL: [Behavior; 12] = [
        Behavior::Prime,
        Behavior::Configure,
        Behavior::Probe,
        Behavior::Cue,
        Behavior::Elicit,
        Behavior::Augment,
        Behavior::Guide,
        Behavior::Explain,
        Behavior::Correct,
        Behavior::Critique,
        Behavior::Reflect,
        Behavior::Approve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Prime => "prime",
            Behavior::Configure => "configure",
            Behavior::Probe => "probe",
            Behavior::Cue => "cue",
            Behavior::Elicit => "elicit",
            Behavior::Augment => "augment",
            Behavior::Guide => "guide",
            Behavior::Explain => "explain",
            Behavior::Correct => "correct",
            Behavior::Critique => "critique",
            Behavior::Reflect => "reflect",
            Behavior::Approve => "approve",
        }
    }

    /// Display label for consoles.
    pub fn label(self) -> &'static str {
        match self {
            Behavior::Prime => "Prime",
            Behavior::Configure => "Configure",
            Behavior::Probe => "Probe",
            Behavior::Cue => "Cue",
            Behavior::Elicit => "Elicit",
            Behavior::Augment => "Augment",
            Behavior::Guide => "Guide",
            Behavior::Explain => "Explain",
            Behavior::Correct => "Correct",
            Behavior::Critique => "Critique",
            Behavior::Reflect => "Reflect",
            Behavior::Approve => "Approve",
        }
    }

    /// One-line definition used in message-composition prompts.
    pub fn definition(self) -> &'static str {
        match self {
            Behavior::Prime => "set the context, the goal and the collaboration boundaries",
            Behavior::Configure => "let the human state preferences and settings",
            Behavior::Probe => "ask an exploratory question to understand the problem",
            Behavior::Cue => "give a timely, relevant hint",
            Behavior::Elicit => "ask a question that draws out the human's own ideas or judgment",
            Behavior::Augment => "supply information that strengthens the human's decision",
            Behavior::Guide => "give clear steps the human can follow",
            Behavior::Explain => "explain what happened and why, clearly",
            Behavior::Correct => "clarify or correct a misunderstanding",
            Behavior::Critique => "challenge a statement constructively",
            Behavior::Reflect => "show how the human's input changed the proposal",
            Behavior::Approve => "ask for explicit approval before committing",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageEvent {
    ContextEstablished,
    NodeDispatched,
    ResponseIntegrated,
    RefusalReceived,
    MisunderstandingDetected,
    Repaired,
    RepairAbandoned,
    AllNodesTerminal,
    SessionAborted,
}

impl StageEvent {
    pub const ALL: [StageEvent; 9] = [
        StageEvent::ContextEstablished,
        StageEvent::NodeDispatched,
        StageEvent::ResponseIntegrated,
        StageEvent::RefusalReceived,
        StageEvent::MisunderstandingDetected,
        StageEvent::Repaired,
        StageEvent::RepairAbandoned,
        StageEvent::AllNodesTerminal,
        StageEvent::SessionAborted,
    ];
}

pub fn allowed_behaviors(stage: Stage) -> BTreeSet<Behavior> {
    use Behavior::*;
    let list: &[Behavior] = match stage {
        Stage::Initial => &[Prime, Configure],
        Stage::During => &[Probe, Cue, Elicit, Augment, Guide, Critique, Reflect, Approve],
        Stage::ErrorHandling => &[Explain, Correct],
        Stage::Ending => &[Approve, Reflect, Explain],
    };
    list.iter().copied().collect()
}

pub fn is_allowed(stage: Stage, behavior: Behavior) -> bool {
    allowed_behaviors(stage).contains(&behavior)
}

/// Total transition function; undefined pairs leave the stage unchanged.
pub fn advance_stage(current: Stage, event: StageEvent) -> Stage {
    use Stage::*;
    use StageEvent::*;
    match (current, event) {
        (Ending, _) => Ending,
        (_, SessionAborted) => Ending,
        (Initial, ContextEstablished) => During,
        (During, RefusalReceived) | (During, MisunderstandingDetected) => ErrorHandling,
        (ErrorHandling, Repaired) | (ErrorHandling, RepairAbandoned) => During,
        (During, AllNodesTerminal) => Ending,
        (s, _) => s,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ResponseKind {
    FreeText {
        #[serde(default)]
        acknowledge_only_allowed: bool,
    },
    Approval,
    Choice { options: Vec<String> },
}

impl ResponseKind {
    pub fn for_behavior(behavior: Behavior) -> Self {
        use Behavior::*;
        match behavior {
            Approve => ResponseKind::Approval,
            Configure | Elicit | Probe => ResponseKind::FreeText { acknowledge_only_allowed: false },
            Cue | Guide | Augment | Explain | Correct | Critique | Reflect | Prime => {
                ResponseKind::FreeText { acknowledge_only_allowed: true }
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ResponseKind::FreeText { .. } => "free_text",
            ResponseKind::Approval => "approval",
            ResponseKind::Choice { .. } => "choice",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum InteractionError {
    #[error("behavior {behavior} is not allowed in stage {stage}")]
    IllegalBehavior { stage: Stage, behavior: Behavior },
    #[error("prompt text is empty")]
    EmptyPrompt,
}

/// The call body before session bookkeeping (ids, timestamps) is attached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallPayload {
    pub node_id: String,
    pub stage: Stage,
    pub behavior: Behavior,
    pub reason: Option<InvocationReason>,
    pub prompt_text: String,
    pub response_kind: ResponseKind,
}

pub fn compose_call(
    behavior: Behavior,
    stage: Stage,
    node: &TaskNode,
    reason: Option<InvocationReason>,
    prompt_text: &str,
) -> Result<CallPayload, InteractionError> {
    if !is_allowed(stage, behavior) {
        return Err(InteractionError::IllegalBehavior { stage, behavior });
    }
    if prompt_text.trim().is_empty() {
        return Err(InteractionError::EmptyPrompt);
    }
    Ok(CallPayload {
        node_id: node.id.clone(),
        stage,
        behavior,
        reason,
        prompt_text: prompt_text.to_string(),
        response_kind: ResponseKind::for_behavior(behavior),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guideline {
    Naturalness,
    Emotionality,
    RelationshipBuilding,
    Transparency,
    Avoidance,
}

impl Guideline {
    pub const ALL: [Guideline; 5] = [
        Guideline::Naturalness,
        Guideline::Emotionality,
        Guideline::RelationshipBuilding,
        Guideline::Transparency,
        Guideline::Avoidance,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Guideline::Naturalness => "naturalness",
            Guideline::Emotionality => "emotionality",
            Guideline::RelationshipBuilding => "relationship_building",
            Guideline::Transparency => "transparency",
            Guideline::Avoidance => "avoidance",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", content = "note", rename_all = "snake_case")]
pub enum GuidelineVerdict {
    Pass,
    Advisory(String),
    Violation(String),
}

impl GuidelineVerdict {
    pub fn name(&self) -> &'static str {
        match self {
            GuidelineVerdict::Pass => "pass",
            GuidelineVerdict::Advisory(_) => "advisory",
            GuidelineVerdict::Violation(_) => "violation",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuidelineReport {
    pub naturalness: GuidelineVerdict,
    pub emotionality: GuidelineVerdict,
    pub relationship_building: GuidelineVerdict,
    pub transparency: GuidelineVerdict,
    pub avoidance: GuidelineVerdict,
}

impl GuidelineReport {
    pub fn entries(&self) -> [(Guideline, &GuidelineVerdict); 5] {
        [
            (Guideline::Naturalness, &self.naturalness),
            (Guideline::Emotionality, &self.emotionality),
            (Guideline::RelationshipBuilding, &self.relationship_building),
            (Guideline::Transparency, &self.transparency),
            (Guideline::Avoidance, &self.avoidance),
        ]
    }

    pub fn has_violation(&self) -> bool {
        self.entries().iter().any(|(_, v)| matches!(v, GuidelineVerdict::Violation(_)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidelineConfig {
    /// How many recent outgoing messages the repetition check looks at.
    pub history_window: usize,
    /// Overlap strictly above this is a repetition.
    pub repetition_threshold: f64,
}

impl Default for GuidelineConfig {
    fn default() -> Self {
        Self { history_window: 10, repetition_threshold: 0.8 }
    }
}

/// Lowercase, punctuation stripped, whitespace collapsed to single spaces.
pub fn normalize(text: &str) -> String {
    let cleaned: String =
        text.chars().flat_map(char::to_lowercase).filter(|c| c.is_alphanumeric() || c.is_whitespace()).collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn trigrams(normalized: &str) -> HashSet<Vec<char>> {
    let chars: Vec<char> = normalized.chars().collect();
    if chars.len() < 3 {
        return std::iter::once(chars).filter(|c| !c.is_empty()).collect();
    }
    chars.windows(3).map(|w| w.to_vec()).collect()
}

/// Jaccard overlap of character trigram sets after normalization.
pub fn trigram_overlap(a: &str, b: &str) -> f64 {
    let ta = trigrams(&normalize(a));
    let tb = trigrams(&normalize(b));
    if ta.is_empty() && tb.is_empty() {
        return 1.0;
    }
    let inter = ta.intersection(&tb).count() as f64;
    let union = ta.union(&tb).count() as f64;
    inter / union
}

const PLANNER_CONCERN: &str = "quality of generated text; shaped by the planner prompt, not machine-judged";

/// `context` is the (stage, behavior) the message is sent under, when known;
/// the transparency check only applies to initial-stage prime messages.
pub fn check_guidelines(
    candidate: &str,
    context: Option<(Stage, Behavior)>,
    recent_history: &[String],
    config: &GuidelineConfig,
) -> GuidelineReport {
    let window_start = recent_history.len().saturating_sub(config.history_window);
    let worst = recent_history[window_start..]
        .iter()
        .map(|h| trigram_overlap(candidate, h))
        .fold(0.0f64, f64::max);
    let avoidance = if worst > config.repetition_threshold {
        GuidelineVerdict::Violation(format!("overlap {worst:.3} with a recent message exceeds {}", config.repetition_threshold))
    } else {
        GuidelineVerdict::Pass
    };
    let transparency = match context {
        Some((Stage::Initial, Behavior::Prime)) if !candidate.contains(DISCLOSURE_MARKER) => {
            GuidelineVerdict::Violation("opening message lacks the capability disclosure".to_string())
        }
        _ => GuidelineVerdict::Pass,
    };
    GuidelineReport {
        naturalness: GuidelineVerdict::Advisory(PLANNER_CONCERN.to_string()),
        emotionality: GuidelineVerdict::Advisory(PLANNER_CONCERN.to_string()),
        relationship_building: GuidelineVerdict::Advisory(PLANNER_CONCERN.to_string()),
        transparency,
        avoidance,
    }
}

/// Behavior-stage legality table as a versioned JSON document.
pub fn behavior_table_json() -> serde_json::Value {
    let stages: BTreeMap<&str, Vec<&str>> =
        Stage::ALL.iter().map(|s| (s.as_str(), allowed_behaviors(*s).iter().map(|b| b.as_str()).collect())).collect();
    let behaviors: Vec<serde_json::Value> = Behavior::ALL
        .iter()
        .map(|b| {
            json!({
                "behavior": b.as_str(),
                "label": b.label(),
                "definition": b.definition(),
                "response_kind": ResponseKind::for_behavior(*b),
            })
        })
        .collect();
    json!({ "version": TABLES_VERSION, "stages": stages, "behaviors": behaviors })
}

/// Stage transition table as a versioned JSON document (identity pairs omitted).
pub fn transition_table_json() -> serde_json::Value {
    let mut rows = Vec::new();
    for s in Stage::ALL {
        for e in StageEvent::ALL {
            let to = advance_stage(s, e);
            if to != s {
                rows.push(json!({ "from": s, "event": e, "to": to }));
            }
        }
    }
    json!({ "version": TABLES_VERSION, "transitions": rows, "default": "identity" })
}

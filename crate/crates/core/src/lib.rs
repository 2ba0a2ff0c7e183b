//! Human-as-a-tool orchestration engine.
//!
//! An AI orchestrator decomposes a goal into a task tree, decides per leaf
//! whether it acts alone or invokes the human (exposed as a tool with a
//! scored profile), issues structured tool calls through a staged
//! interaction state machine, and integrates answers, refusals,
//! counter-proposals and timeouts. Every state change is an appended event,
//! so sessions can be replayed and audited.
//!
//! Module map:
//! - [`schema`]: the human profile, questionnaire ingestion, descriptor and prompt rendering
//! - [`taskgraph`]: task trees, allocation rules, execution order
//! - [`interaction`]: stages, behaviors, transitions, communication guideline checks
//! - [`protocol`]: wire envelope, framing, call/response types, method routing
//! - [`planner`]: the intelligence boundary (scripted and HTTP chat-completion)
//! - [`orchestrator`]: the event-sourced session engine
//! - [`host`]: method dispatch over many sessions, used by the transports
//! - [`store`]: event logs on disk, replay, activation reports
//! - [`sim`] and [`batch`]: randomized scenarios and (optionally parallel) batch runs

use std::fmt;

use serde::{Deserialize, Serialize};

pub mod batch;
pub mod host;
pub mod interaction;
pub mod orchestrator;
pub mod planner;
pub mod protocol;
pub mod schema;
pub mod sim;
pub mod store;
pub mod taskgraph;

/// One violated invariant, addressed by a dotted field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

/// Outcome of a structural check: empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation { path: path.into(), message: message.into() });
    }

    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn paths(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.path.as_str()).collect()
    }

    pub fn into_result(self) -> Result<(), Validation> {
        if self.is_ok() {
            Ok(())
        } else {
            Err(self)
        }
    }
}

impl fmt::Display for Validation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{}: {}", v.path, v.message)?;
        }
        Ok(())
    }
}

/// Canonical JSON (sorted keys, compact) of any serializable value.
pub fn canonical_json<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let v = serde_json::to_value(value)?;
    serde_json::to_string(&v)
}

/// SHA-256 over canonical JSON, hex encoded.
pub fn state_hash<T: Serialize>(value: &T) -> serde_json::Result<String> {
    use sha2::{Digest, Sha256};
    let text = canonical_json(value)?;
    let digest = Sha256::digest(text.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

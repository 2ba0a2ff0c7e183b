//! Hierarchical task trees and the allocation engine.
//!
//! The planner flags each node with what it requires; [`allocate`] turns
//! those flags plus the human's profile into an AI or Human allocation with
//! the ordered list of invocation reasons that hold.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::schema::{validate_profile, HumanToolProfile, ProfileConfig};
use crate::Validation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequirementFlag {
    NeedsCreativity,
    NeedsComplexJudgment,
    NeedsPhysicalInteraction,
    NeedsDomainExpertise,
    NeedsPrivateInfo,
    NeedsPreferences,
    SafetyCritical,
    RequiresAuthorization,
}

impl RequirementFlag {
    pub const ALL: [RequirementFlag; 8] = [
        RequirementFlag::NeedsCreativity,
        RequirementFlag::NeedsComplexJudgment,
        RequirementFlag::NeedsPhysicalInteraction,
        RequirementFlag::NeedsDomainExpertise,
        RequirementFlag::NeedsPrivateInfo,
        RequirementFlag::NeedsPreferences,
        RequirementFlag::SafetyCritical,
        RequirementFlag::RequiresAuthorization,
    ];

    /// The flag subset encoded by the low eight bits of `mask`, in `ALL` order.
    pub fn subset(mask: u8) -> BTreeSet<RequirementFlag> {
        Self::ALL
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, f)| *f)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeStatus {
    Pending,
    InProgress,
    Done,
    Failed,
    Skipped,
}

impl NodeStatus {
    pub const ALL: [NodeStatus; 5] =
        [NodeStatus::Pending, NodeStatus::InProgress, NodeStatus::Done, NodeStatus::Failed, NodeStatus::Skipped];

    /// Done or skipped: lets later siblings proceed.
    pub fn is_closed(self) -> bool {
        matches!(self, NodeStatus::Done | NodeStatus::Skipped)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NodeStatus::Done | NodeStatus::Skipped | NodeStatus::Failed)
    }

    pub fn can_transition_to(self, next: NodeStatus) -> bool {
        use NodeStatus::*;
        matches!(
            (self, next),
            (Pending, InProgress) | (InProgress, Done) | (InProgress, Failed) | (InProgress, Skipped) | (Failed, InProgress)
        )
    }
}

impl fmt::Display for NodeStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            NodeStatus::Pending => "pending",
            NodeStatus::InProgress => "in_progress",
            NodeStatus::Done => "done",
            NodeStatus::Failed => "failed",
            NodeStatus::Skipped => "skipped",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvocationReason {
    CapabilityComplementarity,
    InformationExchange,
    AuthorityControl,
}

impl InvocationReason {
    pub const ALL: [InvocationReason; 3] = [
        InvocationReason::CapabilityComplementarity,
        InvocationReason::InformationExchange,
        InvocationReason::AuthorityControl,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InvocationReason::CapabilityComplementarity => "capability_complementarity",
            InvocationReason::InformationExchange => "information_exchange",
            InvocationReason::AuthorityControl => "authority_control",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    #[serde(rename = "AI")]
    Ai,
    #[serde(rename = "Human")]
    Human,
}

/// Who executes a leaf and, for the human, why.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Allocation {
    actor: Actor,
    reasons: Vec<InvocationReason>,
}

impl Allocation {
    pub fn ai() -> Self {
        Self { actor: Actor::Ai, reasons: Vec::new() }
    }

    pub fn human(reasons: Vec<InvocationReason>) -> Result<Self, AllocationShapeError> {
        if reasons.is_empty() {
            return Err(AllocationShapeError::HumanWithoutReason);
        }
        let unique: HashSet<_> = reasons.iter().collect();
        if unique.len() != reasons.len() {
            return Err(AllocationShapeError::DuplicateReason);
        }
        Ok(Self { actor: Actor::Human, reasons })
    }

    pub fn actor(&self) -> Actor {
        self.actor
    }

    pub fn reasons(&self) -> &[InvocationReason] {
        &self.reasons
    }

    pub fn primary_reason(&self) -> Option<InvocationReason> {
        self.reasons.first().copied()
    }

    pub fn has_reason(&self, reason: InvocationReason) -> bool {
        self.reasons.contains(&reason)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocationShapeError {
    #[error("human allocation needs at least one reason")]
    HumanWithoutReason,
    #[error("duplicate invocation reason")]
    DuplicateReason,
    #[error("AI allocation cannot carry reasons")]
    AiWithReason,
    #[error("primary_reason does not match the first reason")]
    PrimaryMismatch,
}

#[derive(Serialize, Deserialize)]
struct AllocationRepr {
    actor: Actor,
    reasons: Vec<InvocationReason>,
    #[serde(default)]
    primary_reason: Option<InvocationReason>,
}

impl Serialize for Allocation {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        AllocationRepr { actor: self.actor, reasons: self.reasons.clone(), primary_reason: self.primary_reason() }
            .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Allocation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let repr = AllocationRepr::deserialize(deserializer)?;
        let alloc = match repr.actor {
            Actor::Ai if !repr.reasons.is_empty() => Err(AllocationShapeError::AiWithReason),
            Actor::Ai => Ok(Allocation::ai()),
            Actor::Human => Allocation::human(repr.reasons),
        }
        .map_err(serde::de::Error::custom)?;
        if repr.primary_reason.is_some() && repr.primary_reason != alloc.primary_reason() {
            return Err(serde::de::Error::custom(AllocationShapeError::PrimaryMismatch));
        }
        Ok(alloc)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub id: String,
    pub description: String,
    #[serde(default)]
    pub children: Vec<String>,
    #[serde(default)]
    pub requirement_flags: BTreeSet<RequirementFlag>,
    #[serde(default = "pending")]
    pub status: NodeStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub allocation: Option<Allocation>,
}

fn pending() -> NodeStatus {
    NodeStatus::Pending
}

impl TaskNode {
    pub fn leaf(id: &str, description: &str, flags: impl IntoIterator<Item = RequirementFlag>) -> Self {
        Self {
            id: id.to_string(),
            description: description.to_string(),
            children: Vec::new(),
            requirement_flags: flags.into_iter().collect(),
            status: NodeStatus::Pending,
            allocation: None,
        }
    }

    pub fn branch(id: &str, description: &str, children: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            description: description.to_string(),
            children: children.iter().map(|c| c.to_string()).collect(),
            requirement_flags: BTreeSet::new(),
            status: NodeStatus::Pending,
            allocation: None,
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn has(&self, flag: RequirementFlag) -> bool {
        self.requirement_flags.contains(&flag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AllocationPolicy {
    pub capability_threshold: u8,
    pub authority_delegation_cutoff: u8,
    pub reason_precedence: [InvocationReason; 3],
}

impl Default for AllocationPolicy {
    fn default() -> Self {
        Self {
            capability_threshold: 3,
            authority_delegation_cutoff: 4,
            reason_precedence: [
                InvocationReason::AuthorityControl,
                InvocationReason::InformationExchange,
                InvocationReason::CapabilityComplementarity,
            ],
        }
    }
}

impl AllocationPolicy {
    pub fn with_thresholds(capability_threshold: u8, authority_delegation_cutoff: u8) -> Self {
        Self { capability_threshold, authority_delegation_cutoff, ..Self::default() }
    }

    pub fn validate(&self) -> Validation {
        let mut v = Validation::default();
        if !(1..=5).contains(&self.capability_threshold) {
            v.push("capability_threshold", "must be in 1..=5");
        }
        if !(1..=5).contains(&self.authority_delegation_cutoff) {
            v.push("authority_delegation_cutoff", "must be in 1..=5");
        }
        let distinct: HashSet<_> = self.reason_precedence.iter().collect();
        if distinct.len() != 3 {
            v.push("reason_precedence", "must list each reason exactly once");
        }
        v
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("invalid tree: {0}")]
    Invalid(Validation),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{id}` cannot move from {from} to {to}")]
    IllegalTransition { id: String, from: NodeStatus, to: NodeStatus },
    #[error("node `{0}` is not a leaf")]
    NotLeaf(String),
    #[error("replacement subtree must be rooted at `{expected}`, found `{found}`")]
    ReplacementRoot { expected: String, found: String },
    #[error("replacement introduces id `{0}` already used elsewhere in the tree")]
    ReplacementCollision(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AllocateError {
    #[error("node `{0}` is not a leaf")]
    NotLeaf(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(Validation),
    #[error("invalid policy: {0}")]
    InvalidPolicy(Validation),
}

/// Structural checks: duplicates, dangling children, multiple parents,
/// roots, cycles, unreachable nodes, allocations on non-leaves, and the
/// derived-status rule for non-leaves.
pub fn validate_tree(nodes: &[TaskNode]) -> Validation {
    let mut v = Validation::default();
    if nodes.is_empty() {
        v.push("nodes", "tree is empty");
        return v;
    }
    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if n.id.is_empty() {
            v.push(format!("nodes[{i}].id"), "must not be empty");
        }
        if index.insert(n.id.as_str(), i).is_some() {
            v.push(format!("nodes[{i}].id"), format!("duplicate id `{}`", n.id));
        }
    }
    let mut parents: HashMap<&str, Vec<&str>> = HashMap::new();
    for n in nodes {
        for c in &n.children {
            if !index.contains_key(c.as_str()) {
                v.push(format!("{}.children", n.id), format!("child `{c}` does not resolve"));
            }
            parents.entry(c.as_str()).or_default().push(n.id.as_str());
        }
        if !n.is_leaf() && n.allocation.is_some() {
            v.push(format!("{}.allocation", n.id), "allocation on non-leaf");
        }
    }
    for (child, ps) in &parents {
        if ps.len() > 1 {
            v.push(format!("{child}"), format!("node has {} parents", ps.len()));
        }
    }
    let roots: Vec<&str> =
        nodes.iter().map(|n| n.id.as_str()).filter(|id| !parents.contains_key(id)).collect();
    match roots.len() {
        0 => v.push("root", "no root: every node has a parent (cycle)"),
        1 => {}
        k => v.push("root", format!("multiple roots ({k}): {}", roots.join(", "))),
    }

    // Cycle detection over child edges (iterative DFS, colors).
    let mut color: HashMap<&str, u8> = HashMap::new();
    let mut cycle = false;
    for start in nodes.iter().map(|n| n.id.as_str()) {
        if color.get(start).copied().unwrap_or(0) != 0 {
            continue;
        }
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        color.insert(start, 1);
        while let Some((id, next)) = stack.pop() {
            let children = &nodes[index[id]].children;
            if next < children.len() {
                stack.push((id, next + 1));
                let c = children[next].as_str();
                if !index.contains_key(c) {
                    continue;
                }
                match color.get(c).copied().unwrap_or(0) {
                    0 => {
                        color.insert(c, 1);
                        stack.push((c, 0));
                    }
                    1 => cycle = true,
                    _ => {}
                }
            } else {
                color.insert(id, 2);
            }
        }
    }
    if cycle {
        v.push("children", "cycle detected");
    }

    if roots.len() == 1 && !cycle {
        let mut seen: HashSet<&str> = HashSet::new();
        let mut stack = vec![roots[0]];
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            if let Some(&i) = index.get(id) {
                stack.extend(nodes[i].children.iter().map(|c| c.as_str()));
            }
        }
        for n in nodes {
            if !seen.contains(n.id.as_str()) {
                v.push(n.id.clone(), "orphan: unreachable from root");
            }
        }
        if v.is_ok() {
            for n in nodes.iter().filter(|n| !n.is_leaf()) {
                if n.status == NodeStatus::Done
                    && !n.children.iter().all(|c| nodes[index[c.as_str()]].status.is_closed())
                {
                    v.push(format!("{}.status", n.id), "non-leaf done while a child is open");
                }
            }
        }
    }
    v
}

/// Capability-side condition: creativity/judgment needs with a capable
/// human, or any physical interaction.
fn capability_holds(node: &TaskNode, profile: &HumanToolProfile, policy: &AllocationPolicy) -> bool {
    use RequirementFlag::*;
    let cognitive = profile.capabilities.cognitive_creativity.get() >= policy.capability_threshold;
    ((node.has(NeedsCreativity) || node.has(NeedsComplexJudgment)) && cognitive) || node.has(NeedsPhysicalInteraction)
}

fn information_holds(node: &TaskNode) -> bool {
    use RequirementFlag::*;
    node.has(NeedsDomainExpertise) || node.has(NeedsPrivateInfo) || node.has(NeedsPreferences)
}

fn authority_holds(node: &TaskNode, profile: &HumanToolProfile, policy: &AllocationPolicy) -> bool {
    use RequirementFlag::*;
    node.has(SafetyCritical)
        || (node.has(RequiresAuthorization)
            && profile.authority.delegation_level.get() < policy.authority_delegation_cutoff)
}

pub fn allocate(
    node: &TaskNode,
    profile: &HumanToolProfile,
    policy: &AllocationPolicy,
) -> Result<Allocation, AllocateError> {
    if !node.is_leaf() {
        return Err(AllocateError::NotLeaf(node.id.clone()));
    }
    validate_profile(profile, &ProfileConfig::default()).into_result().map_err(AllocateError::InvalidProfile)?;
    policy.validate().into_result().map_err(AllocateError::InvalidPolicy)?;

    let reasons: Vec<InvocationReason> = policy
        .reason_precedence
        .iter()
        .copied()
        .filter(|r| match r {
            InvocationReason::AuthorityControl => authority_holds(node, profile, policy),
            InvocationReason::InformationExchange => information_holds(node),
            InvocationReason::CapabilityComplementarity => capability_holds(node, profile, policy),
        })
        .collect();
    if reasons.is_empty() {
        Ok(Allocation::ai())
    } else {
        Ok(Allocation::human(reasons).expect("reasons are distinct and non-empty"))
    }
}

/// A validated tree. Mutations go through [`TaskTree::mark_status`] and
/// [`TaskTree::replace_subtree`], which keep the invariants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TaskTree {
    nodes: Vec<TaskNode>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    parent: HashMap<String, String>,
}

impl<'de> Deserialize<'de> for TaskTree {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Repr {
            nodes: Vec<TaskNode>,
        }
        let repr = Repr::deserialize(deserializer)?;
        TaskTree::new(repr.nodes).map_err(serde::de::Error::custom)
    }
}

impl TaskTree {
    pub fn new(nodes: Vec<TaskNode>) -> Result<Self, TreeError> {
        validate_tree(&nodes).into_result().map_err(TreeError::Invalid)?;
        let mut tree = Self { nodes, index: HashMap::new(), parent: HashMap::new() };
        tree.reindex();
        Ok(tree)
    }

    fn reindex(&mut self) {
        self.index = self.nodes.iter().enumerate().map(|(i, n)| (n.id.clone(), i)).collect();
        self.parent = self
            .nodes
            .iter()
            .flat_map(|n| n.children.iter().map(move |c| (c.clone(), n.id.clone())))
            .collect();
    }

    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn root(&self) -> &TaskNode {
        self.nodes.iter().find(|n| !self.parent.contains_key(&n.id)).expect("validated tree has a root")
    }

    pub fn get(&self, id: &str) -> Option<&TaskNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn parent_of(&self, id: &str) -> Option<&str> {
        self.parent.get(id).map(String::as_str)
    }

    fn node_mut(&mut self, id: &str) -> Option<&mut TaskNode> {
        let i = *self.index.get(id)?;
        Some(&mut self.nodes[i])
    }

    /// Leaves in depth-first, left-to-right order.
    pub fn leaves(&self) -> Vec<&TaskNode> {
        let mut out = Vec::new();
        let mut stack = vec![self.root().id.as_str()];
        while let Some(id) = stack.pop() {
            let n = self.get(id).expect("indexed");
            if n.is_leaf() {
                out.push(n);
            } else {
                stack.extend(n.children.iter().rev().map(String::as_str));
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        fn walk(t: &TaskTree, id: &str) -> usize {
            let n = t.get(id).expect("indexed");
            1 + n.children.iter().map(|c| walk(t, c)).max().unwrap_or(0)
        }
        walk(self, &self.root().id)
    }

    /// Sets every leaf's allocation, clearing any allocation on non-leaves.
    pub fn allocate_all(&mut self, profile: &HumanToolProfile, policy: &AllocationPolicy) -> Result<(), AllocateError> {
        for n in &mut self.nodes {
            n.allocation = if n.is_leaf() { Some(allocate(n, profile, policy)?) } else { None };
        }
        Ok(())
    }

    /// Drops every allocation so the tree can be allocated from scratch.
    pub fn clear_allocations(&mut self) {
        for n in &mut self.nodes {
            n.allocation = None;
        }
    }

    /// First pending leaf in DFS order whose left siblings along the whole
    /// ancestor path are done or skipped.
    pub fn next_executable(&self) -> Option<&TaskNode> {
        let mut current = self.root();
        loop {
            if current.is_leaf() {
                return (current.status == NodeStatus::Pending).then_some(current);
            }
            let next = current.children.iter().map(|c| self.get(c).expect("indexed")).find(|c| !c.status.is_closed())?;
            current = next;
        }
    }

    /// Moves a leaf along the status lattice and recomputes ancestors.
    pub fn mark_status(&mut self, id: &str, status: NodeStatus) -> Result<(), TreeError> {
        let node = self.get(id).ok_or_else(|| TreeError::UnknownNode(id.to_string()))?;
        if !node.is_leaf() {
            return Err(TreeError::NotLeaf(id.to_string()));
        }
        if !node.status.can_transition_to(status) {
            return Err(TreeError::IllegalTransition { id: id.to_string(), from: node.status, to: status });
        }
        self.node_mut(id).expect("checked").status = status;
        self.recompute_ancestors(id);
        Ok(())
    }

    fn derived_status(&self, id: &str) -> NodeStatus {
        let n = self.get(id).expect("indexed");
        let statuses: Vec<NodeStatus> = n.children.iter().map(|c| self.get(c).expect("indexed").status).collect();
        if statuses.iter().all(|s| *s == NodeStatus::Skipped) {
            NodeStatus::Skipped
        } else if statuses.iter().all(|s| s.is_closed()) {
            NodeStatus::Done
        } else if statuses.iter().all(|s| *s == NodeStatus::Pending) {
            NodeStatus::Pending
        } else if statuses.iter().all(|s| s.is_terminal()) {
            NodeStatus::Failed
        } else {
            NodeStatus::InProgress
        }
    }

    fn recompute_ancestors(&mut self, id: &str) {
        let mut cursor = self.parent.get(id).cloned();
        while let Some(pid) = cursor {
            let s = self.derived_status(&pid);
            self.node_mut(&pid).expect("indexed").status = s;
            cursor = self.parent.get(&pid).cloned();
        }
    }

    fn subtree_ids(&self, id: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![id.to_string()];
        while let Some(x) = stack.pop() {
            if let Some(n) = self.get(&x) {
                stack.extend(n.children.iter().cloned());
            }
            out.push(x);
        }
        out
    }

    /// Replaces the subtree rooted at `slot` wholesale. The replacement must
    /// be rooted at the same id and must not reuse ids from outside the slot.
    pub fn replace_subtree(&mut self, slot: &str, replacement: &TaskTree) -> Result<(), TreeError> {
        if self.get(slot).is_none() {
            return Err(TreeError::UnknownNode(slot.to_string()));
        }
        let new_root = replacement.root();
        if new_root.id != slot {
            return Err(TreeError::ReplacementRoot { expected: slot.to_string(), found: new_root.id.clone() });
        }
        let old: HashSet<String> = self.subtree_ids(slot).into_iter().collect();
        for n in replacement.nodes() {
            if self.index.contains_key(&n.id) && !old.contains(&n.id) {
                return Err(TreeError::ReplacementCollision(n.id.clone()));
            }
        }
        let pos = self.index[slot];
        let mut nodes: Vec<TaskNode> = Vec::with_capacity(self.nodes.len() + replacement.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            if i == pos {
                nodes.extend(replacement.nodes.iter().cloned());
            } else if !old.contains(&n.id) {
                nodes.push(n.clone());
            }
        }
        validate_tree(&nodes).into_result().map_err(TreeError::Invalid)?;
        self.nodes = nodes;
        self.reindex();
        // Statuses of the replacement's interior follow its leaves.
        let mut interior: Vec<String> =
            replacement.nodes.iter().filter(|n| !n.is_leaf()).map(|n| n.id.clone()).collect();
        interior.reverse();
        for id in interior {
            let s = self.derived_status(&id);
            self.node_mut(&id).expect("indexed").status = s;
        }
        if let Some(first_leaf) = replacement.leaves().first() {
            self.recompute_ancestors(&first_leaf.id);
        } else {
            self.recompute_ancestors(slot);
        }
        Ok(())
    }

    /// Count of leaves per status.
    pub fn census(&self) -> std::collections::BTreeMap<NodeStatus, usize> {
        let mut out: std::collections::BTreeMap<NodeStatus, usize> = NodeStatus::ALL.iter().map(|s| (*s, 0)).collect();
        for leaf in self.leaves() {
            *out.entry(leaf.status).or_default() += 1;
        }
        out
    }
}

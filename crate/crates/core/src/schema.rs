//! The Human Tool definition: a scored profile over Capabilities, Information
//! and Authority, ingested from the eight-item self-evaluation questionnaire
//! and rendered both as a tool descriptor and as an in-context prompt block.
//!
//! Questionnaire encoding: items 1-6 and 8 list their strongest option first,
//! so option `i` maps to score `6 - i`. Item 7 (responsibility scope) lists
//! "keep every decision" first, so option `i` maps to delegation level `i`.
//!
//! Descriptor template: the description carries a low-authorization notice
//! (a line starting with [`LOW_AUTHORIZATION_NOTICE`]) whenever
//! `authorization_level <= 2`, and a decision-ownership notice whenever
//! `delegation_level <= 2`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::Validation;

/// Version tag of the descriptor and profile-prompt templates.
pub const TEMPLATE_VERSION: &str = "humantool-templates/1";

/// Default cap on `preference_notes`, in characters.
pub const DEFAULT_MAX_PREFERENCE_NOTES: usize = 4096;

pub const LOW_AUTHORIZATION_NOTICE: &str = "LOW AUTHORIZATION:";
pub const DECISION_OWNERSHIP_NOTICE: &str = "DECISION OWNERSHIP:";

const PROFILE_PROMPT_HEADER: &str = include_str!("../templates/profile_v1.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchemaError {
    #[error("questionnaire expects exactly 8 answers, got {0}")]
    WrongAnswerCount(usize),
    #[error("question {question}: option {index} is outside 1..=5")]
    OptionOutOfRange { question: usize, index: u8 },
    #[error("unknown domain `{0}`")]
    UnknownDomain(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(Validation),
}

/// Ordinal self-assessment, 1 (weakest) to 5 (strongest).
///
/// Deserialization accepts any byte so that out-of-range files surface as
/// validation findings instead of parse failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimensionScore(u8);

impl DimensionScore {
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn new(value: u8) -> Option<Self> {
        (Self::MIN..=Self::MAX).contains(&value).then_some(Self(value))
    }

    /// Builds a score without range checking.
    pub const fn raw(value: u8) -> Self {
        Self(value)
    }

    pub const fn get(self) -> u8 {
        self.0
    }

    pub fn is_valid(self) -> bool {
        (Self::MIN..=Self::MAX).contains(&self.0)
    }
}

impl fmt::Display for DimensionScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/5", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    TravelPlanning,
    StoryWriting,
    Generic,
}

impl Domain {
    pub const ALL: [Domain; 3] = [Domain::TravelPlanning, Domain::StoryWriting, Domain::Generic];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::TravelPlanning => "travel_planning",
            Domain::StoryWriting => "story_writing",
            Domain::Generic => "generic",
        }
    }

    fn activity(self) -> &'static str {
        match self {
            Domain::TravelPlanning | Domain::Generic => "travel planning",
            Domain::StoryWriting => "story writing",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Domain::ALL
            .into_iter()
            .find(|d| d.as_str() == s || d.as_str().replace('_', "-") == s)
            .ok_or_else(|| SchemaError::UnknownDomain(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Capabilities {
    pub cognitive_creativity: DimensionScore,
    pub specialized_skill: DimensionScore,
    pub external_interaction: DimensionScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Information {
    pub domain_expertise: DimensionScore,
    pub private_information: DimensionScore,
    pub preference_clarity: DimensionScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Authority {
    /// 5 = fully delegates decisions to the AI.
    pub delegation_level: DimensionScore,
    /// 5 = full information-sharing authorization.
    pub authorization_level: DimensionScore,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HumanToolProfile {
    pub human_id: String,
    pub domain: Domain,
    pub capabilities: Capabilities,
    pub information: Information,
    pub authority: Authority,
    #[serde(default)]
    pub preference_notes: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub max_preference_notes: usize,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self { max_preference_notes: DEFAULT_MAX_PREFERENCE_NOTES }
    }
}

/// Questionnaire answers as they appear in an answers file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionnaireAnswers {
    pub answers: Vec<u8>,
    pub domain: String,
}

impl QuestionnaireAnswers {
    pub fn into_profile(self, human_id: impl Into<String>) -> Result<HumanToolProfile, SchemaError> {
        let domain = self.domain.parse()?;
        let mut profile = profile_from_questionnaire(&self.answers, domain)?;
        profile.human_id = human_id.into();
        Ok(profile)
    }
}

/// Short labels for the eight questionnaire items, in order.
pub const QUESTION_LABELS: [&str; 8] = [
    "Cognitive judgment and creativity",
    "Specialized skill and competency",
    "External world interaction",
    "Domain expertise knowledge",
    "Private domain information",
    "Preference constraints",
    "Responsibility scope definition",
    "User-authorizable content",
];

/// Index (0-based) of the one item whose options run from least to most delegation.
const DIRECT_ITEM: usize = 6;

fn option_to_score(item: usize, option: u8) -> DimensionScore {
    if item == DIRECT_ITEM {
        DimensionScore(option)
    } else {
        DimensionScore(6 - option)
    }
}

fn score_to_option(item: usize, score: DimensionScore) -> u8 {
    if item == DIRECT_ITEM {
        score.0
    } else {
        6 - score.0
    }
}

pub fn profile_from_questionnaire(answers: &[u8], domain: Domain) -> Result<HumanToolProfile, SchemaError> {
    if answers.len() != 8 {
        return Err(SchemaError::WrongAnswerCount(answers.len()));
    }
    if let Some((i, &index)) = answers.iter().enumerate().find(|(_, a)| !(1..=5).contains(*a)) {
        return Err(SchemaError::OptionOutOfRange { question: i + 1, index });
    }
    let s: Vec<DimensionScore> = answers.iter().enumerate().map(|(i, &a)| option_to_score(i, a)).collect();
    Ok(HumanToolProfile {
        human_id: String::from("human"),
        domain,
        capabilities: Capabilities {
            cognitive_creativity: s[0],
            specialized_skill: s[1],
            external_interaction: s[2],
        },
        information: Information {
            domain_expertise: s[3],
            private_information: s[4],
            preference_clarity: s[5],
        },
        authority: Authority { delegation_level: s[6], authorization_level: s[7] },
        preference_notes: String::new(),
    })
}

impl HumanToolProfile {
    /// Scores in questionnaire order.
    pub fn scores(&self) -> [DimensionScore; 8] {
        [
            self.capabilities.cognitive_creativity,
            self.capabilities.specialized_skill,
            self.capabilities.external_interaction,
            self.information.domain_expertise,
            self.information.private_information,
            self.information.preference_clarity,
            self.authority.delegation_level,
            self.authority.authorization_level,
        ]
    }

    /// Inverse of [`profile_from_questionnaire`] for valid profiles.
    pub fn questionnaire_answers(&self) -> [u8; 8] {
        let mut out = [0u8; 8];
        for (i, score) in self.scores().into_iter().enumerate() {
            out[i] = score_to_option(i, score);
        }
        out
    }

    pub fn uniform(human_id: &str, domain: Domain, score: u8) -> Self {
        let mut p = profile_from_questionnaire(&[3; 8], domain).expect("midpoint answers are valid");
        p.human_id = human_id.to_string();
        let s = DimensionScore::raw(score);
        p.capabilities = Capabilities { cognitive_creativity: s, specialized_skill: s, external_interaction: s };
        p.information = Information { domain_expertise: s, private_information: s, preference_clarity: s };
        p.authority = Authority { delegation_level: s, authorization_level: s };
        p
    }

    fn scored_fields(&self) -> [(&'static str, DimensionScore); 8] {
        let s = self.scores();
        [
            ("capabilities.cognitive_creativity", s[0]),
            ("capabilities.specialized_skill", s[1]),
            ("capabilities.external_interaction", s[2]),
            ("information.domain_expertise", s[3]),
            ("information.private_information", s[4]),
            ("information.preference_clarity", s[5]),
            ("authority.delegation_level", s[6]),
            ("authority.authorization_level", s[7]),
        ]
    }
}

pub fn validate_profile(profile: &HumanToolProfile, config: &ProfileConfig) -> Validation {
    let mut v = Validation::default();
    if profile.human_id.trim().is_empty() {
        v.push("human_id", "must not be empty");
    }
    for (path, score) in profile.scored_fields() {
        if !score.is_valid() {
            v.push(path, format!("score {} outside 1..=5", score.get()));
        }
    }
    let notes = profile.preference_notes.chars().count();
    if notes > config.max_preference_notes {
        v.push(
            "preference_notes",
            format!("{notes} characters exceeds maximum {}", config.max_preference_notes),
        );
    }
    v
}

fn ensure_valid(profile: &HumanToolProfile) -> Result<(), SchemaError> {
    validate_profile(profile, &ProfileConfig::default())
        .into_result()
        .map_err(SchemaError::InvalidProfile)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolAnnotations {
    pub nondeterministic: bool,
    pub may_refuse: bool,
    pub may_negotiate: bool,
    pub latency: String,
}

impl Default for ToolAnnotations {
    fn default() -> Self {
        Self {
            nondeterministic: true,
            may_refuse: true,
            may_negotiate: true,
            latency: "variable".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolDescriptor {
    pub name: String,
    pub description: String,
    pub input_schema: serde_json::Value,
    pub annotations: ToolAnnotations,
}

impl ToolDescriptor {
    /// Structural checks every descriptor must satisfy.
    pub fn validate(&self) -> Validation {
        let mut v = Validation::default();
        if self.name.trim().is_empty() {
            v.push("name", "must not be empty");
        }
        if self.annotations != ToolAnnotations::default() {
            v.push("annotations", "must be {nondeterministic, may_refuse, may_negotiate: true, latency: variable}");
        }
        if !self.input_schema.is_object() {
            v.push("input_schema", "must be an object schema");
        }
        v
    }
}

fn tool_name(human_id: &str) -> String {
    let slug: String = human_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    format!("human_{slug}")
}

fn call_input_schema() -> serde_json::Value {
    json!({
        "type": "object",
        "properties": {
            "behavior": {
                "type": "string",
                "enum": ["prime", "configure", "probe", "cue", "elicit", "augment",
                         "guide", "explain", "correct", "critique", "reflect", "approve"]
            },
            "prompt_text": { "type": "string", "minLength": 1 },
            "response_kind": {
                "type": "object",
                "properties": {
                    "type": { "type": "string", "enum": ["free_text", "approval", "choice"] },
                    "options": { "type": "array", "items": { "type": "string" } }
                },
                "required": ["type"]
            }
        },
        "required": ["behavior", "prompt_text", "response_kind"]
    })
}

pub fn render_tool_descriptor(profile: &HumanToolProfile) -> Result<ToolDescriptor, SchemaError> {
    ensure_valid(profile)?;
    let c = &profile.capabilities;
    let i = &profile.information;
    let a = &profile.authority;
    let mut description = format!(
        "Human collaborator `{}` ({}) callable as a tool. Responses are non-deterministic, arrive with \
         variable latency, and may be refusals or counter-proposals.\n\
         Capabilities: cognitive_creativity {}, specialized_skill {}, external_interaction {}.\n\
         Information: domain_expertise {}, private_information {}, preference_clarity {}.\n\
         Authority: delegation_level {}, authorization_level {}.",
        profile.human_id,
        profile.domain,
        c.cognitive_creativity,
        c.specialized_skill,
        c.external_interaction,
        i.domain_expertise,
        i.private_information,
        i.preference_clarity,
        a.delegation_level,
        a.authorization_level,
    );
    if a.authorization_level.get() <= 2 {
        description.push_str(&format!(
            "\n{LOW_AUTHORIZATION_NOTICE} this human shares only minimal personal information; \
             request personal data explicitly and never assume consent."
        ));
    }
    if a.delegation_level.get() <= 2 {
        description.push_str(&format!(
            "\n{DECISION_OWNERSHIP_NOTICE} this human keeps most decisions; request approval before committing."
        ));
    }
    Ok(ToolDescriptor {
        name: tool_name(&profile.human_id),
        description,
        input_schema: call_input_schema(),
        annotations: ToolAnnotations::default(),
    })
}

fn level_gloss(score: DimensionScore) -> &'static str {
    match score.get() {
        5 => "very strong",
        4 => "strong",
        3 => "moderate",
        2 => "limited",
        _ => "minimal",
    }
}

fn delegation_gloss(score: DimensionScore) -> &'static str {
    match score.get() {
        5 => "delegates most decisions to the AI and relies on its choices",
        4 => "delegates most tasks and keeps only important matters",
        3 => "shares decisions jointly with the AI",
        2 => "keeps key decisions and uses the AI for parts of the work",
        _ => "prefers to make all decisions personally",
    }
}

fn authorization_gloss(score: DimensionScore) -> &'static str {
    match score.get() {
        5 => "authorizes sharing of detailed personal information",
        4 => "shares most useful information and reserves sensitive details",
        3 => "shares only basic necessary information",
        2 => "shares minimal information, only when strictly necessary",
        _ => "does not authorize sharing personal information",
    }
}

pub fn render_profile_prompt(profile: &HumanToolProfile) -> Result<String, SchemaError> {
    ensure_valid(profile)?;
    let c = &profile.capabilities;
    let i = &profile.information;
    let a = &profile.authority;
    let activity = profile.domain.activity();
    let mut out = String::new();
    out.push_str(PROFILE_PROMPT_HEADER.trim_end());
    out.push_str(&format!("\nHuman: {} | Domain: {}\n", profile.human_id, profile.domain));
    out.push_str("\n[Capabilities]\n");
    out.push_str(&format!(
        "- Cognitive creativity: {} ({} intuition and creativity in {activity})\n",
        c.cognitive_creativity,
        level_gloss(c.cognitive_creativity)
    ));
    out.push_str(&format!(
        "- Specialized skill: {} ({} hands-on competency)\n",
        c.specialized_skill,
        level_gloss(c.specialized_skill)
    ));
    out.push_str(&format!(
        "- External interaction: {} ({} ability to act on and gather from the outside world)\n",
        c.external_interaction,
        level_gloss(c.external_interaction)
    ));
    out.push_str("\n[Information]\n");
    out.push_str(&format!(
        "- Domain expertise: {} ({} knowledge of {activity})\n",
        i.domain_expertise,
        level_gloss(i.domain_expertise)
    ));
    out.push_str(&format!(
        "- Private information: {} ({} access to information unknown to others)\n",
        i.private_information,
        level_gloss(i.private_information)
    ));
    out.push_str(&format!(
        "- Preference clarity: {} ({} clarity about personal preferences and constraints)\n",
        i.preference_clarity,
        level_gloss(i.preference_clarity)
    ));
    out.push_str("\n[Authority]\n");
    out.push_str(&format!("- Delegation: {} (the human {})\n", a.delegation_level, delegation_gloss(a.delegation_level)));
    out.push_str(&format!(
        "- Authorization: {} (the human {})\n",
        a.authorization_level,
        authorization_gloss(a.authorization_level)
    ));
    if !profile.preference_notes.is_empty() {
        out.push_str("\n[Preferences]\n");
        out.push_str(&profile.preference_notes);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strongest_answers_map_to_top_scores() {
        let p = profile_from_questionnaire(&[1, 1, 1, 1, 1, 1, 5, 1], Domain::TravelPlanning).unwrap();
        assert!(p.scores().iter().all(|s| s.get() == 5));
    }

    #[test]
    fn weakest_answers_map_to_bottom_scores() {
        for domain in Domain::ALL {
            let p = profile_from_questionnaire(&[5, 5, 5, 5, 5, 5, 1, 5], domain).unwrap();
            assert!(p.scores().iter().all(|s| s.get() == 1));
        }
    }

    #[test]
    fn midpoint_is_fixed() {
        let p = profile_from_questionnaire(&[3; 8], Domain::StoryWriting).unwrap();
        assert!(p.scores().iter().all(|s| s.get() == 3));
    }

    #[test]
    fn questionnaire_errors() {
        assert_eq!(
            profile_from_questionnaire(&[3; 7], Domain::Generic),
            Err(SchemaError::WrongAnswerCount(7))
        );
        assert_eq!(
            profile_from_questionnaire(&[3, 3, 0, 3, 3, 3, 3, 3], Domain::Generic),
            Err(SchemaError::OptionOutOfRange { question: 3, index: 0 })
        );
        assert!(matches!("poetry".parse::<Domain>(), Err(SchemaError::UnknownDomain(_))));
        assert_eq!("travel-planning".parse::<Domain>().unwrap(), Domain::TravelPlanning);
    }

    #[test]
    fn validation_reports_paths() {
        let mut p = HumanToolProfile::uniform("h", Domain::Generic, 3);
        assert!(validate_profile(&p, &ProfileConfig::default()).is_ok());
        p.capabilities.cognitive_creativity = DimensionScore::raw(6);
        let v = validate_profile(&p, &ProfileConfig::default());
        assert_eq!(v.paths(), vec!["capabilities.cognitive_creativity"]);

        let mut p = HumanToolProfile::uniform("h", Domain::Generic, 3);
        p.preference_notes = "x".repeat(5000);
        assert_eq!(p.preference_notes.chars().count(), 5000);
        let v = validate_profile(&p, &ProfileConfig::default());
        assert_eq!(v.paths(), vec!["preference_notes"]);
    }

    #[test]
    fn descriptor_is_deterministic_and_annotated() {
        let p = HumanToolProfile::uniform("alice", Domain::TravelPlanning, 4);
        let a = serde_json::to_vec(&render_tool_descriptor(&p).unwrap()).unwrap();
        let b = serde_json::to_vec(&render_tool_descriptor(&p).unwrap()).unwrap();
        assert_eq!(a, b);
        let d = render_tool_descriptor(&p).unwrap();
        assert!(d.annotations.nondeterministic && d.annotations.may_refuse && d.annotations.may_negotiate);
        assert_eq!(d.annotations.latency, "variable");
        assert!(d.validate().is_ok());
        assert!(!d.description.contains(LOW_AUTHORIZATION_NOTICE));
    }

    #[test]
    fn low_authorization_notice() {
        let mut p = HumanToolProfile::uniform("bob", Domain::StoryWriting, 3);
        p.authority.authorization_level = DimensionScore::raw(1);
        let d = render_tool_descriptor(&p).unwrap();
        assert!(d.description.contains(LOW_AUTHORIZATION_NOTICE));
    }

    #[test]
    fn invalid_profile_cannot_render() {
        let mut p = HumanToolProfile::uniform("bob", Domain::StoryWriting, 3);
        p.authority.delegation_level = DimensionScore::raw(0);
        assert!(matches!(render_tool_descriptor(&p), Err(SchemaError::InvalidProfile(_))));
        assert!(render_profile_prompt(&p).is_err());
    }

    #[test]
    fn prompt_sections() {
        let mut p = HumanToolProfile::uniform("carol", Domain::TravelPlanning, 5);
        let text = render_profile_prompt(&p).unwrap();
        assert_eq!(text, render_profile_prompt(&p).unwrap());
        for section in ["[Capabilities]", "[Information]", "[Authority]"] {
            assert!(text.contains(section));
        }
        assert!(!text.contains("[Preferences]"));
        assert!(text.contains("delegates most decisions"));

        p.preference_notes = "Prefers trains over flights.".into();
        let text = render_profile_prompt(&p).unwrap();
        assert!(text.trim_end().ends_with("Prefers trains over flights."));
    }
}

//! Core vocabulary: cases, complexity levels, advice and audit events.
//!
//! Every type here is an immutable value with a canonical snake_case JSON
//! form. The same serialization is used for storage, the HTTP API and the
//! audit log, so field names are part of the external contract.

use std::collections::BTreeMap;
use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Upper bound on a plausible patient age, in years.
pub const MAX_PATIENT_AGE: i64 = 130;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LanguageTagError {
    #[error("language tag is empty")]
    Empty,
    #[error("primary subtag of `{0}` must be lowercase ASCII letters")]
    BadPrimarySubtag(String),
}

/// A BCP-47 style language tag such as `te`, `hi` or `sw-KE`.
///
/// `en` is the pivot language in which every agent and rule operates.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageTag(String);

impl LanguageTag {
    pub const PIVOT: &'static str = "en";

    pub fn parse(code: &str) -> Result<Self, LanguageTagError> {
        let code = code.trim();
        if code.is_empty() {
            return Err(LanguageTagError::Empty);
        }
        let primary = code.split(['-', '_']).next().unwrap_or_default();
        if primary.is_empty() || !primary.chars().all(|c| c.is_ascii_lowercase()) {
            return Err(LanguageTagError::BadPrimarySubtag(code.to_string()));
        }
        Ok(Self(code.to_string()))
    }

    pub fn pivot() -> Self {
        Self(Self::PIVOT.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn primary(&self) -> &str {
        self.0.split(['-', '_']).next().unwrap_or(&self.0)
    }

    pub fn is_pivot(&self) -> bool {
        self.primary() == Self::PIVOT
    }
}

impl TryFrom<String> for LanguageTag {
    type Error = LanguageTagError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::parse(&value)
    }
}

impl From<LanguageTag> for String {
    fn from(tag: LanguageTag) -> Self {
        tag.0
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Opaque case identifier. Restricted to characters that are safe as a
/// single path component because the file store keys directories by it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CaseId(String);

impl CaseId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_well_formed(&self) -> bool {
        !self.0.is_empty()
            && self.0.len() <= 128
            && self
                .0
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Female,
    Male,
    Other,
    Unknown,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Other => "other",
            Sex::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vital {
    pub value: f64,
    pub unit: String,
}

/// One patient presentation as entered by the health worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub case_id: CaseId,
    pub language: LanguageTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_age: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_sex: Option<Sex>,
    pub complaint_text: String,
    #[serde(default)]
    pub history: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vitals: Option<BTreeMap<String, Vital>>,
}

impl CaseRecord {
    pub fn new(case_id: CaseId, language: LanguageTag, complaint_text: impl Into<String>) -> Self {
        Self {
            case_id,
            language,
            patient_age: None,
            patient_sex: None,
            complaint_text: complaint_text.into(),
            history: Vec::new(),
            vitals: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    MalformedCaseId,
    EmptyComplaint,
    AgeOutOfRange { age: i64 },
    EmptyHistoryEntry { index: usize },
    EmptyVitalName,
    NonFiniteVital { name: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::MalformedCaseId => write!(f, "case id must be 1-128 chars of [A-Za-z0-9_-]"),
            Violation::EmptyComplaint => write!(f, "complaint text is empty"),
            Violation::AgeOutOfRange { age } => {
                write!(f, "patient age {age} outside 0..={MAX_PATIENT_AGE}")
            }
            Violation::EmptyHistoryEntry { index } => write!(f, "history entry {index} is empty"),
            Violation::EmptyVitalName => write!(f, "vital sign with empty name"),
            Violation::NonFiniteVital { name } => write!(f, "vital `{name}` is not a finite number"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Collects every violated case invariant. Violations are data; an empty
/// report means every downstream stage will accept the case.
pub fn validate_case(case: &CaseRecord) -> ValidationReport {
    let mut violations = Vec::new();
    if !case.case_id.is_well_formed() {
        violations.push(Violation::MalformedCaseId);
    }
    if case.complaint_text.trim().is_empty() {
        violations.push(Violation::EmptyComplaint);
    }
    if let Some(age) = case.patient_age {
        if !(0..=MAX_PATIENT_AGE).contains(&age) {
            violations.push(Violation::AgeOutOfRange { age });
        }
    }
    for (index, entry) in case.history.iter().enumerate() {
        if entry.trim().is_empty() {
            violations.push(Violation::EmptyHistoryEntry { index });
        }
    }
    if let Some(vitals) = &case.vitals {
        for (name, vital) in vitals {
            if name.trim().is_empty() {
                violations.push(Violation::EmptyVitalName);
            }
            if !vital.value.is_finite() {
                violations.push(Violation::NonFiniteVital { name: name.clone() });
            }
        }
    }
    ValidationReport { violations }
}

/// Case complexity. The derived order is the clinical order Low < Medium < High.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComplexityLevel {
    Low,
    Medium,
    High,
}

impl ComplexityLevel {
    pub const ALL: [ComplexityLevel; 3] = [Self::Low, Self::Medium, Self::High];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

impl fmt::Display for ComplexityLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Never lowers a case's level: the result is the max of both under the
/// clinical order.
pub fn escalate(current: ComplexityLevel, proposed: ComplexityLevel) -> ComplexityLevel {
    current.max(proposed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageResult {
    pub level: ComplexityLevel,
    pub rationale: String,
    pub red_flags: Vec<String>,
    pub confidence: f64,
}

impl TriageResult {
    pub const FAIL_SAFE_RATIONALE: &'static str = "assessment unavailable — fail-safe escalation";

    /// Result used whenever the assessment cannot be obtained.
    pub fn fail_safe() -> Self {
        Self {
            level: ComplexityLevel::High,
            rationale: Self::FAIL_SAFE_RATIONALE.to_string(),
            red_flags: Vec::new(),
            confidence: 0.0,
        }
    }

    pub fn is_well_formed(&self) -> bool {
        (0.0..=1.0).contains(&self.confidence) && self.red_flags.iter().all(|f| !f.trim().is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdviceError {
    #[error("advice packet has no diagnoses")]
    NoDiagnoses,
    #[error("diagnosis label is empty")]
    EmptyLabel,
    #[error("diagnosis confidence outside [0, 1]")]
    ConfidenceOutOfRange,
    #[error("referral flag and referral reason disagree")]
    ReferralMismatch,
}

/// Synthesized diagnosis and plan, before simplification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvicePacket {
    pub diagnoses: Vec<Diagnosis>,
    pub actions: Vec<String>,
    pub referral: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referral_reason: Option<String>,
    pub contributing_roles: Vec<String>,
}

impl AdvicePacket {
    /// Builds a packet, ordering diagnoses by descending confidence (stable
    /// for equal confidences) and checking the referral invariant.
    pub fn new(
        mut diagnoses: Vec<Diagnosis>,
        actions: Vec<String>,
        referral_reason: Option<String>,
        contributing_roles: Vec<String>,
    ) -> Result<Self, AdviceError> {
        if diagnoses.is_empty() {
            return Err(AdviceError::NoDiagnoses);
        }
        for d in &diagnoses {
            if d.label.trim().is_empty() {
                return Err(AdviceError::EmptyLabel);
            }
            if !(0.0..=1.0).contains(&d.confidence) {
                return Err(AdviceError::ConfidenceOutOfRange);
            }
        }
        diagnoses.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let referral_reason = referral_reason.filter(|r| !r.trim().is_empty());
        Ok(Self {
            diagnoses,
            actions,
            referral: referral_reason.is_some(),
            referral_reason,
            contributing_roles,
        })
    }

    pub fn check(&self) -> Result<(), AdviceError> {
        if self.diagnoses.is_empty() {
            return Err(AdviceError::NoDiagnoses);
        }
        if self.referral != self.referral_reason.is_some() {
            return Err(AdviceError::ReferralMismatch);
        }
        Ok(())
    }

    pub fn top_diagnosis(&self) -> &Diagnosis {
        &self.diagnoses[0]
    }
}

/// Plain-language numbered steps. Localization happens in the pipeline; until
/// then `localized_text` mirrors `pivot_text`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplifiedAdvice {
    pub steps: Vec<String>,
    pub pivot_text: String,
    pub localized_text: String,
    pub readability_grade: f64,
    pub disclaimers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Received,
    InputScreen,
    TranslateIn,
    Triage,
    Council,
    Synthesize,
    Simplify,
    OutputScreen,
    TranslateOut,
    Delivered,
    Blocked,
    Referred,
}

impl Stage {
    /// Canonical order of one turn. The terminal stages share the last slot.
    pub const CANONICAL: [Stage; 10] = [
        Stage::Received,
        Stage::InputScreen,
        Stage::TranslateIn,
        Stage::Triage,
        Stage::Council,
        Stage::Synthesize,
        Stage::Simplify,
        Stage::OutputScreen,
        Stage::TranslateOut,
        Stage::Delivered,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::Delivered | Stage::Blocked | Stage::Referred)
    }

    /// Position in the canonical order.
    pub fn rank(self) -> usize {
        match self {
            Stage::Received => 0,
            Stage::InputScreen => 1,
            Stage::TranslateIn => 2,
            Stage::Triage => 3,
            Stage::Council => 4,
            Stage::Synthesize => 5,
            Stage::Simplify => 6,
            Stage::OutputScreen => 7,
            Stage::TranslateOut => 8,
            Stage::Delivered | Stage::Blocked | Stage::Referred => 9,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Received => "received",
            Stage::InputScreen => "input_screen",
            Stage::TranslateIn => "translate_in",
            Stage::Triage => "triage",
            Stage::Council => "council",
            Stage::Synthesize => "synthesize",
            Stage::Simplify => "simplify",
            Stage::OutputScreen => "output_screen",
            Stage::TranslateOut => "translate_out",
            Stage::Delivered => "delivered",
            Stage::Blocked => "blocked",
            Stage::Referred => "referred",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One append-only audit record. `detail` is already redacted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub case_id: CaseId,
    pub seq: u64,
    pub stage: Stage,
    pub timestamp: DateTime<Utc>,
    pub payload_digest: String,
    pub detail: serde_json::Value,
}

/// SHA-256 over the canonical JSON form of a stage output, hex encoded.
///
/// `serde_json::Value` objects keep keys sorted, which makes the encoding
/// canonical for any serializable input.
pub fn payload_digest<T: Serialize + ?Sized>(output: &T) -> String {
    let canonical = serde_json::to_value(output)
        .and_then(|v| serde_json::to_vec(&v))
        .unwrap_or_default();
    hex::encode(Sha256::digest(&canonical))
}

/// Pivot-language view of a case handed to every agent prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseFacts {
    pub age: Option<i64>,
    pub sex: Option<Sex>,
    pub complaint: String,
    pub history: Vec<String>,
    pub vitals: BTreeMap<String, Vital>,
    /// Earlier turns of the dialog, oldest first, in the pivot language.
    pub earlier_turns: Vec<String>,
}

impl CaseFacts {
    pub fn new(case: &CaseRecord, pivot_complaint: impl Into<String>) -> Self {
        Self {
            age: case.patient_age,
            sex: case.patient_sex,
            complaint: pivot_complaint.into(),
            history: case.history.clone(),
            vitals: case.vitals.clone().unwrap_or_default(),
            earlier_turns: Vec::new(),
        }
    }

    /// Line-oriented rendering used inside prompts.
    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(age) = self.age {
            out.push_str(&format!("age: {age}\n"));
        }
        if let Some(sex) = self.sex {
            out.push_str(&format!("sex: {sex}\n"));
        }
        if !self.earlier_turns.is_empty() {
            out.push_str("earlier turns:\n");
            for (i, turn) in self.earlier_turns.iter().enumerate() {
                out.push_str(&format!("- turn {}: {}\n", i + 1, turn));
            }
        }
        out.push_str(&format!("complaint: {}\n", self.complaint));
        if self.history.is_empty() {
            out.push_str("history: none recorded\n");
        } else {
            out.push_str(&format!("history: {}\n", self.history.join("; ")));
        }
        if !self.vitals.is_empty() {
            out.push_str("vitals:\n");
            for (name, vital) in &self.vitals {
                out.push_str(&format!("- {name}: {} {}\n", vital.value, vital.unit));
            }
        }
        out
    }
}

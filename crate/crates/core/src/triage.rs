//! Complexity assessment by a general-practitioner persona.
//!
//! The model classifies the case as low, medium or high complexity. Parsing
//! is lenient about prose around the JSON answer, but anything that does not
//! yield a recognisable level is a failure, and repeated failure resolves to
//! High so that an unavailable model can never produce a silent Low.

use std::path::Path;

use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendPool, ChatMessage, ChatRequest};
use crate::domain::{escalate, CaseFacts, ComplexityLevel, TriageResult};
use crate::text::first_json_object;

/// First line of every triage prompt; script matchers key on it.
pub const TASK_MARKER: &str = "Task: triage";
pub const REPROMPT: &str = "Respond with only the JSON object.";
pub const CASE_FACTS_SLOT: &str = "{{case_facts}}";
pub const LEVEL_DEFINITIONS_SLOT: &str = "{{level_definitions}}";
pub const DEFAULT_ATTEMPTS: u32 = 3;

const DEFAULT_SYSTEM: &str = "Task: triage
You are a general practitioner supporting a rural health worker. Decide how complex the case is.
{{level_definitions}}
When unsure between two levels, choose the higher one.";

const DEFAULT_USER: &str = "Case facts:
{{case_facts}}";

const DEFAULT_SCHEMA_HINT: &str = r#"Answer with a JSON object: {"complexity": "low" | "medium" | "high", "rationale": string, "red_flags": [string], "confidence": number between 0 and 1}"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelDefinitions {
    pub low: String,
    pub medium: String,
    pub high: String,
}

impl Default for LevelDefinitions {
    fn default() -> Self {
        Self {
            low: "Low complexity: one well-defined problem that a single primary care provider can \
                  resolve, for example a minor infection, a routine check-up, or follow-up of \
                  diabetes or hypertension that is under control."
                .into(),
            medium: "Medium complexity: several interacting problems that call for a \
                     multidisciplinary team, for example coexisting chronic diseases, an unclear \
                     diagnosis, or treatment needing input from more than one specialty."
                .into(),
            high: "High complexity: a serious situation needing an integrated care team at a \
                   regional health center, for example failure of several organs, complicated \
                   care after surgery, or major trauma."
                .into(),
        }
    }
}

impl LevelDefinitions {
    fn get(&self, level: ComplexityLevel) -> &str {
        match level {
            ComplexityLevel::Low => &self.low,
            ComplexityLevel::Medium => &self.medium,
            ComplexityLevel::High => &self.high,
        }
    }

    fn render(&self) -> String {
        format!("- {}\n- {}\n- {}", self.low, self.medium, self.high)
    }
}

/// Editable red-flag rule: a case-insensitive regex over the complaint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedFlagRule {
    pub pattern: String,
    pub flag: String,
}

impl RedFlagRule {
    pub fn new(pattern: &str, flag: &str) -> Self {
        Self { pattern: pattern.into(), flag: flag.into() }
    }
}

pub fn default_red_flags() -> Vec<RedFlagRule> {
    vec![
        RedFlagRule::new(r"\bchest pain\b", "chest_pain"),
        RedFlagRule::new(r"\b(shortness of breath|difficulty breathing|breathless)", "breathing_difficulty"),
        RedFlagRule::new(r"\bmulti[- ]?organ", "multi_organ_involvement"),
        RedFlagRule::new(r"\b(trauma|road accident|crush injury|fell from)\b", "trauma"),
        RedFlagRule::new(r"\b(heavy|severe|uncontrolled) bleeding\b", "severe_bleeding"),
        RedFlagRule::new(r"\b(seizures?|convulsions?|fits)\b", "seizure"),
        RedFlagRule::new(r"\b(after|post)[- ]?(surgery|operation)\b", "post_surgical"),
    ]
}

pub fn load_red_flags(path: &Path) -> Result<Vec<RedFlagRule>, TemplateError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&raw).map_err(|e| TemplateError::Io(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("triage system text does not embed the {0} level definition")]
    MissingLevelDefinition(ComplexityLevel),
    #[error("triage user template lacks the {{{{case_facts}}}} slot")]
    MissingCaseFactsSlot,
    #[error("red-flag pattern `{pattern}` does not compile: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error("red-flag rule with empty flag name")]
    EmptyFlag,
    #[error("cannot load triage configuration: {0}")]
    Io(String),
}

#[derive(Debug, Clone)]
pub struct TriagePromptTemplate {
    system_text: String,
    user_template: String,
    output_schema_hint: String,
    red_flags: Vec<(Regex, String)>,
}

impl TriagePromptTemplate {
    /// Renders `{{level_definitions}}` into `system_text` and checks that all
    /// three definitions end up in it verbatim.
    pub fn new(
        system_text: &str,
        user_template: &str,
        definitions: &LevelDefinitions,
        red_flags: &[RedFlagRule],
    ) -> Result<Self, TemplateError> {
        let system_text = system_text.replace(LEVEL_DEFINITIONS_SLOT, &definitions.render());
        for level in ComplexityLevel::ALL {
            let def = definitions.get(level);
            if def.trim().is_empty() || !system_text.contains(def) {
                return Err(TemplateError::MissingLevelDefinition(level));
            }
        }
        if !user_template.contains(CASE_FACTS_SLOT) {
            return Err(TemplateError::MissingCaseFactsSlot);
        }
        let red_flags = red_flags
            .iter()
            .map(|rule| {
                if rule.flag.trim().is_empty() {
                    return Err(TemplateError::EmptyFlag);
                }
                RegexBuilder::new(&rule.pattern)
                    .case_insensitive(true)
                    .build()
                    .map(|re| (re, rule.flag.clone()))
                    .map_err(|e| TemplateError::BadPattern {
                        pattern: rule.pattern.clone(),
                        reason: e.to_string(),
                    })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            system_text,
            user_template: user_template.to_string(),
            output_schema_hint: DEFAULT_SCHEMA_HINT.to_string(),
            red_flags,
        })
    }

    pub fn with_defaults(red_flags: &[RedFlagRule]) -> Result<Self, TemplateError> {
        Self::new(DEFAULT_SYSTEM, DEFAULT_USER, &LevelDefinitions::default(), red_flags)
    }

    pub fn default_user_template() -> &'static str {
        DEFAULT_USER
    }

    pub fn default_system_text() -> &'static str {
        DEFAULT_SYSTEM
    }

    pub fn system_text(&self) -> &str {
        &self.system_text
    }

    /// Flags of every red-flag rule that matches `text`, in rule order.
    pub fn red_flags_in(&self, text: &str) -> Vec<String> {
        self.red_flags
            .iter()
            .filter(|(re, _)| re.is_match(text))
            .map(|(_, flag)| flag.clone())
            .collect()
    }
}

/// One triage request: GP system message plus the rendered case facts and
/// the answer-format instruction.
pub fn build_triage_prompt(
    facts: &CaseFacts,
    template: &TriagePromptTemplate,
    backend_name: &str,
) -> ChatRequest {
    let user = format!(
        "{}\n\n{}",
        template.user_template.replace(CASE_FACTS_SLOT, facts.render().trim_end()),
        template.output_schema_hint
    );
    ChatRequest::new(
        backend_name,
        vec![ChatMessage::system(template.system_text.clone()), ChatMessage::user(user)],
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseFailure {
    #[error("no JSON object in model output")]
    NoJsonObject,
    #[error("JSON object has no `complexity` string")]
    MissingComplexity,
    #[error("unrecognised complexity `{0}`")]
    UnknownComplexity(String),
    #[error("field `{0}` has the wrong type")]
    BadField(&'static str),
}

pub fn parse_complexity(label: &str) -> Option<ComplexityLevel> {
    match label.trim().to_lowercase().as_str() {
        "low" => Some(ComplexityLevel::Low),
        "medium" | "moderate" => Some(ComplexityLevel::Medium),
        "high" | "severe" => Some(ComplexityLevel::High),
        _ => None,
    }
}

/// Extracts a triage answer from raw model output. Missing confidence
/// defaults to 0.5; out-of-range confidence is clamped into [0, 1].
pub fn parse_triage_output(raw: &str) -> Result<TriageResult, ParseFailure> {
    let obj = first_json_object(raw).ok_or(ParseFailure::NoJsonObject)?;
    let label = obj
        .get("complexity")
        .and_then(Value::as_str)
        .ok_or(ParseFailure::MissingComplexity)?;
    let level = parse_complexity(label).ok_or_else(|| ParseFailure::UnknownComplexity(label.to_string()))?;
    let rationale = match obj.get("rationale") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseFailure::BadField("rationale")),
    };
    let red_flags = match obj.get("red_flags") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        Some(_) => return Err(ParseFailure::BadField("red_flags")),
    };
    let confidence = match obj.get("confidence") {
        None | Some(Value::Null) => 0.5,
        Some(v) => v.as_f64().ok_or(ParseFailure::BadField("confidence"))?.clamp(0.0, 1.0),
    };
    Ok(TriageResult { level, rationale, red_flags, confidence })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub attempts: u32,
    pub backend: String,
}

/// Outcome plus bookkeeping for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageAssessment {
    pub result: TriageResult,
    pub backend_calls: u32,
    pub fail_safe: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<String>,
}

/// Total function from a case to a triage result. Parse failures are
/// re-prompted up to `config.attempts` times; exhausting the attempts or a
/// hard backend error yields [`TriageResult::fail_safe`]. Matching red-flag
/// rules add their flag and raise the level to at least Medium.
pub async fn assess_complexity(
    facts: &CaseFacts,
    template: &TriagePromptTemplate,
    pool: &BackendPool,
    config: &TriageConfig,
) -> TriageAssessment {
    let mut request = build_triage_prompt(facts, template, &config.backend);
    let mut failures = Vec::new();
    let mut backend_calls = 0;
    let mut parsed = None;
    for _ in 0..config.attempts.max(1) {
        backend_calls += 1;
        let reply = match pool.call(&request).await {
            Ok(delivered) => delivered.response.content,
            Err(err) => {
                failures.push(err.to_string());
                break;
            }
        };
        match parse_triage_output(&reply) {
            Ok(result) => {
                parsed = Some(result);
                break;
            }
            Err(failure) => {
                failures.push(failure.to_string());
                if !reply.trim().is_empty() {
                    request.messages.push(ChatMessage::assistant(reply));
                }
                request.messages.push(ChatMessage::user(REPROMPT));
            }
        }
    }
    let fail_safe = parsed.is_none();
    let mut result = parsed.unwrap_or_else(TriageResult::fail_safe);
    for flag in template.red_flags_in(&facts.complaint) {
        result.level = escalate(result.level, ComplexityLevel::Medium);
        if !result.red_flags.contains(&flag) {
            result.red_flags.push(flag);
        }
    }
    TriageAssessment { result, backend_calls, fail_safe, failures }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;
    use std::sync::Arc;

    use super::*;
    use crate::backend::{Matcher, RetryPolicy, ScriptFault, ScriptedBackend};
    use crate::clock::ManualClock;
    use crate::domain::Vital;

    fn facts(complaint: &str) -> CaseFacts {
        CaseFacts {
            age: None,
            sex: None,
            complaint: complaint.into(),
            history: vec![],
            vitals: BTreeMap::new(),
            earlier_turns: vec![],
        }
    }

    fn template() -> TriagePromptTemplate {
        TriagePromptTemplate::with_defaults(&[RedFlagRule::new(r"chest pain", "chest_pain")]).unwrap()
    }

    fn pool_with(script: ScriptedBackend) -> (BackendPool, Arc<ScriptedBackend>) {
        let script = Arc::new(script);
        let mut pool = BackendPool::new(Arc::new(ManualClock::default()));
        pool.insert("gp", script.clone(), RetryPolicy::new(0));
        (pool, script)
    }

    fn config() -> TriageConfig {
        TriageConfig { attempts: DEFAULT_ATTEMPTS, backend: "gp".into() }
    }

    #[test]
    fn prompt_includes_complaint_and_vitals() {
        let mut f = facts("cough for three days");
        let req = build_triage_prompt(&f, &template(), "gp");
        assert!(req.messages[1].content.contains("cough for three days"));
        assert!(req.messages[0].content.starts_with(TASK_MARKER));
        for def in [LevelDefinitions::default().low, LevelDefinitions::default().high] {
            assert!(req.messages[0].content.contains(&def));
        }
        f.vitals.insert("temp_c".into(), Vital { value: 39.5, unit: "C".into() });
        let req = build_triage_prompt(&f, &template(), "gp");
        assert!(req.messages[1].content.contains("temp_c: 39.5"));
        assert!(req.validate().is_ok());
    }

    #[test]
    fn template_without_a_definition_is_rejected() {
        let defs = LevelDefinitions::default();
        let system = format!("Task: triage\n{}\n{}", defs.low, defs.high);
        assert_eq!(
            TriagePromptTemplate::new(&system, DEFAULT_USER, &defs, &[]).unwrap_err(),
            TemplateError::MissingLevelDefinition(ComplexityLevel::Medium)
        );
        assert_eq!(
            TriagePromptTemplate::new(DEFAULT_SYSTEM, "no slot", &defs, &[]).unwrap_err(),
            TemplateError::MissingCaseFactsSlot
        );
        assert!(matches!(
            TriagePromptTemplate::with_defaults(&[RedFlagRule::new("(", "x")]),
            Err(TemplateError::BadPattern { .. })
        ));
    }

    #[test]
    fn parse_examples() {
        let r = parse_triage_output(
            r#"Sure: {"complexity":"medium","rationale":"two chronic conditions","red_flags":[],"confidence":0.8}"#,
        )
        .unwrap();
        assert_eq!(r.level, ComplexityLevel::Medium);
        assert_eq!(r.rationale, "two chronic conditions");
        assert_eq!(r.confidence, 0.8);

        let r = parse_triage_output(r#"{"complexity":"MODERATE"}"#).unwrap();
        assert_eq!((r.level, r.confidence), (ComplexityLevel::Medium, 0.5));

        assert_eq!(parse_triage_output("I think it is serious."), Err(ParseFailure::NoJsonObject));
    }

    #[test]
    fn parse_synonyms_and_failures() {
        let level = |raw: &str| parse_triage_output(raw).map(|r| r.level);
        assert_eq!(level("```json\n{\"complexity\": \" Severe \"}\n```"), Ok(ComplexityLevel::High));
        assert_eq!(level(r#"{"complexity":"LOW","confidence":3}"#), Ok(ComplexityLevel::Low));
        assert_eq!(
            level(r#"{"complexity":"critical"}"#),
            Err(ParseFailure::UnknownComplexity("critical".into()))
        );
        assert_eq!(level(r#"{"level":"low"}"#), Err(ParseFailure::MissingComplexity));
        assert_eq!(
            level(r#"{"complexity":"low","confidence":"high"}"#),
            Err(ParseFailure::BadField("confidence"))
        );
        let r = parse_triage_output(r#"{"complexity":"low","red_flags":["", " fever "],"confidence":-1}"#).unwrap();
        assert_eq!(r.red_flags, vec!["fever"]);
        assert_eq!(r.confidence, 0.0);
    }

    #[tokio::test]
    async fn low_reply_passes_through() {
        let s = ScriptedBackend::new("gp");
        s.always(TASK_MARKER, r#"{"complexity":"low","confidence":0.9}"#).unwrap();
        let (pool, script) = pool_with(s);
        let out = assess_complexity(&facts("mild cold"), &template(), &pool, &config()).await;
        assert_eq!(out.result.level, ComplexityLevel::Low);
        assert!(!out.fail_safe);
        assert_eq!(script.call_count(), 1);
    }

    #[tokio::test]
    async fn garbage_three_times_fails_safe() {
        let s = ScriptedBackend::new("gp");
        s.on(TASK_MARKER, &["garbage", "more garbage", "still garbage"]).unwrap();
        let (pool, script) = pool_with(s);
        let out = assess_complexity(&facts("mild cold"), &template(), &pool, &config()).await;
        assert_eq!(out.result, TriageResult::fail_safe());
        assert!(out.fail_safe);
        assert_eq!(out.backend_calls, 3);
        let last = script.calls().pop().unwrap();
        assert_eq!(last.messages.last().unwrap().content, REPROMPT);
    }

    #[tokio::test]
    async fn second_attempt_can_recover() {
        let s = ScriptedBackend::new("gp");
        s.on(TASK_MARKER, &["hmm", r#"{"complexity":"medium"}"#]).unwrap();
        let (pool, _) = pool_with(s);
        let out = assess_complexity(&facts("mild cold"), &template(), &pool, &config()).await;
        assert_eq!(out.result.level, ComplexityLevel::Medium);
        assert_eq!(out.backend_calls, 2);
    }

    #[tokio::test]
    async fn hard_backend_error_fails_safe() {
        let s = ScriptedBackend::new("gp");
        s.register_script(Matcher::substring(TASK_MARKER), vec![ScriptFault::Timeout.into()], true)
            .unwrap();
        let (pool, _) = pool_with(s);
        let out = assess_complexity(&facts("mild cold"), &template(), &pool, &config()).await;
        assert_eq!(out.result.level, ComplexityLevel::High);
        assert_eq!(out.result.confidence, 0.0);
        assert_eq!(out.backend_calls, 1);
    }

    #[tokio::test]
    async fn red_flag_raises_low_to_medium() {
        // Fixture rule "chest pain" matches the complaint below; the model says
        // low, so the level becomes max(Low, Medium) = Medium.
        let s = ScriptedBackend::new("gp");
        s.always(TASK_MARKER, r#"{"complexity":"low"}"#).unwrap();
        let (pool, _) = pool_with(s);
        let out = assess_complexity(&facts("Chest pain since morning"), &template(), &pool, &config()).await;
        assert_eq!(out.result.level, ComplexityLevel::Medium);
        assert_eq!(out.result.red_flags, vec!["chest_pain"]);
    }

    #[test]
    fn default_red_flags_compile_and_match() {
        let t = TriagePromptTemplate::with_defaults(&default_red_flags()).unwrap();
        assert_eq!(t.red_flags_in("road accident with heavy bleeding"), vec!["trauma", "severe_bleeding"]);
        assert!(t.red_flags_in("runny nose").is_empty());
    }
}

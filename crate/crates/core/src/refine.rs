//! Guardrail chain and plain-language simplification.

use std::path::Path;

use regex::{NoExpand, Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendConfig, BackendPool, ChatMessage, ChatRequest};
use crate::domain::{AdvicePacket, SimplifiedAdvice};
use crate::text::first_json_object;

pub const SIMPLIFY_MARKER: &str = "Task: simplify";
pub const MODERATION_MARKER: &str = "Task: moderation";
pub const EMERGENCY_TAG: &str = "[EMERGENCY]";
pub const MODERATION_UNAVAILABLE: &str = "moderation_unavailable";
pub const MODERATION_FLAGGED: &str = "moderation_flagged";
pub const DEFAULT_MAX_GRADE: f64 = 8.0;
pub const STRONGER_REPROMPT: &str =
    "That is still too hard to read. Use very short sentences and everyday words. Keep the numbered steps.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Pass,
    Block,
    Transform,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GuardrailVerdict {
    pub decision: Decision,
    pub reasons: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transformed_text: Option<String>,
}

impl GuardrailVerdict {
    pub fn pass(reasons: Vec<String>) -> Self {
        Self { decision: Decision::Pass, reasons, transformed_text: None }
    }

    pub fn block(reasons: Vec<String>) -> Self {
        debug_assert!(!reasons.is_empty());
        Self { decision: Decision::Block, reasons, transformed_text: None }
    }

    pub fn transform(reasons: Vec<String>, text: String) -> Self {
        Self { decision: Decision::Transform, reasons, transformed_text: Some(text) }
    }

    pub fn is_block(&self) -> bool {
        self.decision == Decision::Block
    }

    /// The text to carry forward: the transformed text if any, else `original`.
    pub fn apply<'a>(&'a self, original: &'a str) -> &'a str {
        self.transformed_text.as_deref().unwrap_or(original)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedPattern {
    pub pattern: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PiiRule {
    pub pattern: String,
    pub replacement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesetSpec {
    #[serde(default)]
    pub input_block_patterns: Vec<NamedPattern>,
    #[serde(default)]
    pub emergency_patterns: Vec<NamedPattern>,
    #[serde(default)]
    pub output_block_patterns: Vec<NamedPattern>,
    #[serde(default)]
    pub pii_rules: Vec<PiiRule>,
    pub mandatory_disclaimer: String,
    #[serde(default)]
    pub moderation_endpoint: Option<BackendConfig>,
}

#[derive(Debug, Error)]
pub enum RulesetError {
    #[error("cannot read ruleset {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid ruleset json: {0}")]
    Json(String),
    #[error("mandatory disclaimer is empty")]
    EmptyDisclaimer,
    #[error("rule {name:?} does not compile: {reason}")]
    BadPattern { name: String, reason: String },
    #[error("rule {0:?} has an empty name")]
    UnnamedRule(String),
    #[error("pii replacement {0:?} is itself matched by a pii rule")]
    ReplacementMatches(String),
    #[error("mandatory disclaimer triggers output rule {0:?}")]
    DisclaimerBlocked(String),
}

#[derive(Debug, Clone)]
struct Compiled {
    name: String,
    regex: Regex,
}

fn compile(pattern: &str, name: &str) -> Result<Regex, RulesetError> {
    RegexBuilder::new(pattern)
        .case_insensitive(true)
        .build()
        .map_err(|e| RulesetError::BadPattern { name: name.to_string(), reason: e.to_string() })
}

fn compile_named(rules: &[NamedPattern]) -> Result<Vec<Compiled>, RulesetError> {
    rules
        .iter()
        .map(|r| {
            if r.name.trim().is_empty() {
                return Err(RulesetError::UnnamedRule(r.pattern.clone()));
            }
            Ok(Compiled { name: r.name.clone(), regex: compile(&r.pattern, &r.name)? })
        })
        .collect()
}

fn matching_names(rules: &[Compiled], text: &str) -> Vec<String> {
    rules.iter().filter(|r| r.regex.is_match(text)).map(|r| r.name.clone()).collect()
}

/// Validated, compiled guardrail rules. Immutable after construction.
#[derive(Debug, Clone)]
pub struct GuardrailRuleset {
    spec: RulesetSpec,
    input_block: Vec<Compiled>,
    emergency: Vec<Compiled>,
    output_block: Vec<Compiled>,
    pii: Vec<(Regex, String)>,
}

impl GuardrailRuleset {
    pub fn new(spec: RulesetSpec) -> Result<Self, RulesetError> {
        if spec.mandatory_disclaimer.trim().is_empty() {
            return Err(RulesetError::EmptyDisclaimer);
        }
        let input_block = compile_named(&spec.input_block_patterns)?;
        let emergency = compile_named(&spec.emergency_patterns)?;
        let output_block = compile_named(&spec.output_block_patterns)?;
        let pii = spec
            .pii_rules
            .iter()
            .map(|r| Ok((compile(&r.pattern, &r.replacement)?, r.replacement.clone())))
            .collect::<Result<Vec<_>, RulesetError>>()?;
        for (_, replacement) in &pii {
            if pii.iter().any(|(re, _)| re.is_match(replacement)) {
                return Err(RulesetError::ReplacementMatches(replacement.clone()));
            }
        }
        if let Some(name) = matching_names(&output_block, &spec.mandatory_disclaimer).into_iter().next() {
            return Err(RulesetError::DisclaimerBlocked(name));
        }
        Ok(Self { spec, input_block, emergency, output_block, pii })
    }

    pub fn from_json(raw: &str) -> Result<Self, RulesetError> {
        let spec: RulesetSpec = serde_json::from_str(raw).map_err(|e| RulesetError::Json(e.to_string()))?;
        Self::new(spec)
    }

    pub fn load(path: &Path) -> Result<Self, RulesetError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| RulesetError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_json(&raw)
    }

    pub fn spec(&self) -> &RulesetSpec {
        &self.spec
    }

    pub fn disclaimer(&self) -> &str {
        &self.spec.mandatory_disclaimer
    }

    pub fn moderation_endpoint(&self) -> Option<&BackendConfig> {
        self.spec.moderation_endpoint.as_ref()
    }
}

/// Pre-translation check on the raw worker text: prompt-injection patterns
/// only, since they do not depend on the script the text is written in.
pub fn screen_injection(raw_text: &str, ruleset: &GuardrailRuleset) -> GuardrailVerdict {
    let hits = matching_names(&ruleset.input_block, raw_text);
    if hits.is_empty() {
        GuardrailVerdict::pass(Vec::new())
    } else {
        GuardrailVerdict::block(hits)
    }
}

/// Pivot-text input screen. Block patterns win over emergency tagging.
pub fn screen_input(pivot_text: &str, ruleset: &GuardrailRuleset) -> GuardrailVerdict {
    let blocked = matching_names(&ruleset.input_block, pivot_text);
    if !blocked.is_empty() {
        return GuardrailVerdict::block(blocked);
    }
    let emergencies = matching_names(&ruleset.emergency, pivot_text);
    if emergencies.is_empty() {
        return GuardrailVerdict::pass(Vec::new());
    }
    let tagged = if pivot_text.starts_with(EMERGENCY_TAG) {
        pivot_text.to_string()
    } else {
        format!("{EMERGENCY_TAG} {pivot_text}")
    };
    GuardrailVerdict::transform(emergencies, tagged)
}

async fn moderate(text: &str, pool: &BackendPool, backend: &str) -> Option<Vec<String>> {
    let system = format!(
        "{MODERATION_MARKER}\nReview the health advice below for misinformation or harmful content.\n\
         Answer with a JSON object: {{\"flagged\": boolean, \"categories\": [string]}}"
    );
    let request = ChatRequest::new(backend, vec![ChatMessage::system(system), ChatMessage::user(text)]);
    let delivered = pool.call(&request).await.ok()?;
    let obj = first_json_object(&delivered.response.content)?;
    let flagged = obj.get("flagged")?.as_bool()?;
    if !flagged {
        return Some(Vec::new());
    }
    let mut categories: Vec<String> = obj
        .get("categories")
        .and_then(Value::as_array)
        .map(|c| c.iter().filter_map(Value::as_str).map(|s| format!("moderation:{s}")).collect())
        .unwrap_or_default();
    if categories.is_empty() {
        categories.push(MODERATION_FLAGGED.to_string());
    }
    Some(categories)
}

/// Output screen: blocklisted claims block; otherwise the mandatory
/// disclaimer is appended unless already present. When a moderation
/// backend is supplied and fails, local rules still apply and the reason
/// list records `moderation_unavailable`.
pub async fn screen_output(
    pivot_text: &str,
    ruleset: &GuardrailRuleset,
    moderation: Option<(&BackendPool, &str)>,
) -> GuardrailVerdict {
    let mut reasons = matching_names(&ruleset.output_block, pivot_text);
    let mut unavailable = false;
    if let Some((pool, backend)) = moderation {
        match moderate(pivot_text, pool, backend).await {
            Some(flags) => reasons.extend(flags),
            None => {
                tracing::warn!("moderation endpoint unavailable; local rules only");
                unavailable = true;
            }
        }
    }
    let blocking = !reasons.is_empty();
    if unavailable {
        reasons.push(MODERATION_UNAVAILABLE.to_string());
    }
    if blocking {
        return GuardrailVerdict::block(reasons);
    }
    disclaimer_verdict(pivot_text, ruleset, reasons)
}

fn disclaimer_verdict(text: &str, ruleset: &GuardrailRuleset, mut reasons: Vec<String>) -> GuardrailVerdict {
    let disclaimer = ruleset.disclaimer();
    if text.contains(disclaimer) {
        return GuardrailVerdict::pass(reasons);
    }
    reasons.push("disclaimer_appended".to_string());
    let joined = if text.trim().is_empty() {
        disclaimer.to_string()
    } else {
        format!("{}\n\n{disclaimer}", text.trim_end())
    };
    GuardrailVerdict::transform(reasons, joined)
}

/// Replaces every PII match with its rule's token. Returns the number of
/// replacements made.
pub fn redact_pii(text: &str, ruleset: &GuardrailRuleset) -> (String, usize) {
    let mut out = text.to_string();
    let mut count = 0;
    for (regex, replacement) in &ruleset.pii {
        let hits = regex.find_iter(&out).count();
        if hits > 0 {
            count += hits;
            out = regex.replace_all(&out, NoExpand(replacement)).into_owned();
        }
    }
    (out, count)
}

fn syllables(word: &str) -> usize {
    let mut groups = 0;
    let mut in_vowel = false;
    for c in word.chars().flat_map(char::to_lowercase) {
        let vowel = matches!(c, 'a' | 'e' | 'i' | 'o' | 'u' | 'y');
        if vowel && !in_vowel {
            groups += 1;
        }
        in_vowel = vowel;
    }
    groups.max(1)
}

fn words_of(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace().filter(|w| w.chars().any(char::is_alphanumeric))
}

/// Flesch-Kincaid grade level with vowel-group syllable counting.
pub fn readability_grade(pivot_text: &str) -> f64 {
    let sentences = pivot_text
        .split(['.', '!', '?'])
        .filter(|s| words_of(s).next().is_some())
        .count();
    let words: Vec<&str> = words_of(pivot_text).collect();
    if words.is_empty() || sentences == 0 {
        return 0.0;
    }
    let syllable_total: usize = words.iter().map(|w| syllables(w)).sum();
    let w = words.len() as f64;
    0.39 * (w / sentences as f64) + 11.8 * (syllable_total as f64 / w) - 15.59
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimplifyConfig {
    pub max_grade: f64,
}

impl Default for SimplifyConfig {
    fn default() -> Self {
        Self { max_grade: DEFAULT_MAX_GRADE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimplifyOutcome {
    /// Pivot-language advice; `localized_text` mirrors `pivot_text` until
    /// the pipeline translates it.
    pub advice: SimplifiedAdvice,
    pub screen: GuardrailVerdict,
    pub readability_exceeded: bool,
    pub reprompted: bool,
    pub fallback: bool,
}

/// Extracts numbered or bulleted lines, stripping the marker.
pub fn parse_steps(reply: &str) -> Vec<String> {
    let marker = Regex::new(r"^\s*(?:\d+[.)]|[-*•])\s+(.+?)\s*$").expect("static pattern");
    reply
        .lines()
        .filter_map(|line| marker.captures(line).map(|c| c[1].to_string()))
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn render_steps(steps: &[String]) -> String {
    steps
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

fn packet_summary(packet: &AdvicePacket) -> String {
    let mut text = String::from("Diagnoses:\n");
    for d in &packet.diagnoses {
        text.push_str(&format!("- {} (confidence {:.2})\n", d.label, d.confidence));
    }
    text.push_str("Actions:\n");
    for a in &packet.actions {
        text.push_str(&format!("- {a}\n"));
    }
    if let Some(reason) = &packet.referral_reason {
        text.push_str(&format!("Referral: {reason}\n"));
    }
    text
}

fn grade_of(steps: &[String]) -> f64 {
    readability_grade(&steps.join("\n"))
}

/// Rewrites an advice packet as plain numbered steps, then runs the output
/// screen over the rendered steps.
pub async fn simplify_advice(
    packet: &AdvicePacket,
    pool: &BackendPool,
    backend: &str,
    ruleset: &GuardrailRuleset,
    config: &SimplifyConfig,
    moderation: Option<(&BackendPool, &str)>,
) -> SimplifyOutcome {
    let system = format!(
        "{SIMPLIFY_MARKER}\nRewrite this advice for a community health worker as short numbered steps. \
         Use plain words a reader at school grade {:.0} can follow. One action per line.",
        config.max_grade
    );
    let mut messages = vec![ChatMessage::system(system), ChatMessage::user(packet_summary(packet))];
    let mut reprompted = false;
    let mut fallback = false;

    let first = pool.call(&ChatRequest::new(backend, messages.clone())).await;
    let mut steps = match &first {
        Ok(d) => parse_steps(&d.response.content),
        Err(err) => {
            tracing::warn!("simplifier call failed: {err}");
            fallback = true;
            Vec::new()
        }
    };
    if !fallback && steps.is_empty() {
        fallback = true;
    }
    if !fallback && grade_of(&steps) > config.max_grade {
        reprompted = true;
        let reply = first.as_ref().map(|d| d.response.content.clone()).unwrap_or_default();
        messages.push(ChatMessage::assistant(reply));
        messages.push(ChatMessage::user(STRONGER_REPROMPT));
        if let Ok(second) = pool.call(&ChatRequest::new(backend, messages)).await {
            let retry_steps = parse_steps(&second.response.content);
            if !retry_steps.is_empty() {
                steps = retry_steps;
            }
        }
    }
    if fallback {
        steps = packet.actions.clone();
    }
    let readability = grade_of(&steps);
    let readability_exceeded = reprompted && readability > config.max_grade;
    let rendered = render_steps(&steps);
    let screen = screen_output(&rendered, ruleset, moderation).await;
    let pivot_text = screen.apply(&rendered).to_string();
    let disclaimers = if pivot_text.contains(ruleset.disclaimer()) {
        vec![ruleset.disclaimer().to_string()]
    } else {
        Vec::new()
    };
    SimplifyOutcome {
        advice: SimplifiedAdvice {
            steps,
            localized_text: pivot_text.clone(),
            pivot_text,
            readability_grade: readability,
            disclaimers,
        },
        screen,
        readability_exceeded,
        reprompted,
        fallback,
    }
}

//! Benchmark harness: dataset loading, answer extraction, scoring and the
//! baseline comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, LazyLock};

use async_trait::async_trait;
use futures::stream::{self, StreamExt};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{BackendPool, ChatMessage, ChatRequest};
use crate::domain::{CaseId, CaseRecord, LanguageTag};
use crate::pipeline::Engine;

pub const ANSWER_MARKER: &str = "Task: answer question";
pub const YNM: [&str; 3] = ["yes", "no", "maybe"];
const DDX_OPTIONS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemKind {
    Mcq,
    Ynm,
    Ddx,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub kind: ItemKind,
    pub question: String,
    pub contexts: Vec<String>,
    /// Label to option text. Empty for yes/no/maybe items.
    pub options: BTreeMap<String, String>,
    pub gold: String,
    pub lang: LanguageTag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Medqa,
    Pubmedqa,
    Ddxplus,
}

impl FromStr for DatasetFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "medqa" => Ok(Self::Medqa),
            "pubmedqa" => Ok(Self::Pubmedqa),
            "ddxplus" => Ok(Self::Ddxplus),
            other => Err(format!("unknown dataset format `{other}`")),
        }
    }
}

impl DatasetFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Medqa => "medqa",
            Self::Pubmedqa => "pubmedqa",
            Self::Ddxplus => "ddxplus",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MalformedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub format: DatasetFormat,
    pub items: Vec<BenchmarkItem>,
    pub malformed: Vec<MalformedLine>,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset {path}: {reason}")]
    Unreadable { path: String, reason: String },
    #[error("dataset has no usable items ({malformed} malformed lines)")]
    EmptyDataset { malformed: usize },
}

#[derive(Deserialize)]
struct MedqaLine {
    #[serde(default)]
    id: Option<Value>,
    question: String,
    options: BTreeMap<String, String>,
    answer_idx: String,
    #[serde(default)]
    lang: Option<String>,
}

#[derive(Deserialize)]
struct PubmedqaLine {
    #[serde(default, alias = "pubid")]
    id: Option<Value>,
    #[serde(alias = "QUESTION")]
    question: String,
    #[serde(default, alias = "CONTEXTS")]
    contexts: Vec<String>,
    final_decision: String,
    #[serde(default)]
    lang: Option<String>,
}

#[derive(Deserialize)]
struct DdxplusLine {
    #[serde(default)]
    id: Option<Value>,
    #[serde(alias = "AGE")]
    age: Value,
    #[serde(alias = "SEX")]
    sex: String,
    #[serde(alias = "PATHOLOGY")]
    pathology: String,
    #[serde(default, alias = "INITIAL_EVIDENCE")]
    initial_evidence: Option<String>,
    #[serde(default, alias = "EVIDENCES")]
    evidences: Vec<String>,
    #[serde(alias = "DIFFERENTIAL_DIAGNOSIS")]
    differential_diagnosis: Vec<(String, f64)>,
    #[serde(default)]
    lang: Option<String>,
}

fn item_id(id: Option<Value>, format: DatasetFormat, line: usize) -> String {
    match id {
        Some(Value::String(s)) if !s.trim().is_empty() => s,
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("{}-{line}", format.as_str()),
    }
}

fn item_lang(lang: Option<String>) -> Result<LanguageTag, String> {
    match lang {
        None => Ok(LanguageTag::pivot()),
        Some(code) => LanguageTag::parse(&code).map_err(|e| format!("bad lang: {e}")),
    }
}

/// Option labels A, B, C, ... for `n` options.
pub fn option_labels(n: usize) -> Vec<String> {
    (0..n).map(|i| char::from(b'A' + (i as u8)).to_string()).collect()
}

fn parse_line(raw: &str, format: DatasetFormat, line: usize) -> Result<BenchmarkItem, String> {
    match format {
        DatasetFormat::Medqa => {
            let l: MedqaLine = serde_json::from_str(raw).map_err(|e| e.to_string())?;
            if l.options.len() < 2 {
                return Err("fewer than two options".into());
            }
            let gold = l.answer_idx.trim().to_string();
            if !l.options.contains_key(&gold) {
                return Err(format!("answer_idx `{gold}` is not an option"));
            }
            Ok(BenchmarkItem {
                id: item_id(l.id, format, line),
                kind: ItemKind::Mcq,
                question: l.question,
                contexts: Vec::new(),
                options: l.options,
                gold,
                lang: item_lang(l.lang)?,
            })
        }
        DatasetFormat::Pubmedqa => {
            let l: PubmedqaLine = serde_json::from_str(raw).map_err(|e| e.to_string())?;
            let gold = l.final_decision.trim().to_lowercase();
            if !YNM.contains(&gold.as_str()) {
                return Err(format!("final_decision `{gold}` is not yes/no/maybe"));
            }
            Ok(BenchmarkItem {
                id: item_id(l.id, format, line),
                kind: ItemKind::Ynm,
                question: l.question,
                contexts: l.contexts,
                options: BTreeMap::new(),
                gold,
                lang: item_lang(l.lang)?,
            })
        }
        DatasetFormat::Ddxplus => {
            let l: DdxplusLine = serde_json::from_str(raw).map_err(|e| e.to_string())?;
            let mut ranked = l.differential_diagnosis.clone();
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            let mut names: Vec<String> = vec![l.pathology.clone()];
            for (name, _) in ranked {
                if names.len() == DDX_OPTIONS {
                    break;
                }
                if !names.contains(&name) {
                    names.push(name);
                }
            }
            if names.len() < 2 {
                return Err("differential has fewer than two diagnoses".into());
            }
            names.sort();
            let options: BTreeMap<String, String> = option_labels(names.len()).into_iter().zip(names).collect();
            let gold = options
                .iter()
                .find(|(_, name)| **name == l.pathology)
                .map(|(label, _)| label.clone())
                .expect("pathology is an option");
            let age = match &l.age {
                Value::Number(n) => n.to_string(),
                Value::String(s) => s.clone(),
                _ => return Err("age must be a number".into()),
            };
            let mut question = format!("Patient: age {age}, sex {}.", l.sex);
            if let Some(initial) = &l.initial_evidence {
                question.push_str(&format!(" Presenting evidence: {initial}."));
            }
            if !l.evidences.is_empty() {
                question.push_str(&format!(" Findings: {}.", l.evidences.join(", ")));
            }
            question.push_str(" What is the most likely diagnosis?");
            Ok(BenchmarkItem {
                id: item_id(l.id, format, line),
                kind: ItemKind::Ddx,
                question,
                contexts: Vec::new(),
                options,
                gold,
                lang: item_lang(l.lang)?,
            })
        }
    }
}

/// Parses JSONL text. Bad lines are collected, never fatal.
pub fn parse_dataset(raw: &str, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let mut items = Vec::new();
    let mut malformed = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line, format, idx + 1) {
            Ok(item) => items.push(item),
            Err(reason) => malformed.push(MalformedLine { line: idx + 1, reason }),
        }
    }
    if items.is_empty() {
        return Err(DatasetError::EmptyDataset { malformed: malformed.len() });
    }
    Ok(Dataset { format, items, malformed })
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Dataset, DatasetError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| DatasetError::Unreadable { path: path.display().to_string(), reason: e.to_string() })?;
    parse_dataset(&raw, format)
}

static ANSWER_PAREN: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer(?:\s+is|\s*:)\s*(?:option\s+)?\*{0,2}\(([A-Za-z])\)").expect("static pattern")
});
static ANSWER_BARE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer(?:\s+is|\s*:)\s*(?:option\s+)?\*{0,2}([A-Za-z])\b").expect("static pattern")
});
static ANSWER_YNM: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\banswer(?:\s+is|\s*:)\s*\*{0,2}\(?(yes|no|maybe)\b").expect("static pattern")
});
static YNM_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\b(yes|no|maybe)\b").expect("static pattern"));

fn explicit_label(raw: &str, item: &BenchmarkItem) -> Option<String> {
    let mut candidates: Vec<(usize, String)> = Vec::new();
    for caps in ANSWER_PAREN.captures_iter(raw) {
        let m = caps.get(1).expect("group");
        let upper = m.as_str().to_ascii_uppercase();
        let label = if item.options.contains_key(m.as_str()) { m.as_str().to_string() } else { upper };
        if item.options.contains_key(&label) {
            candidates.push((m.start(), label));
        }
    }
    for caps in ANSWER_BARE.captures_iter(raw) {
        let m = caps.get(1).expect("group");
        if item.options.contains_key(m.as_str()) {
            candidates.push((m.start(), m.as_str().to_string()));
        }
    }
    candidates.into_iter().max_by_key(|(pos, _)| *pos).map(|(_, label)| label)
}

fn lone_final_label(raw: &str, item: &BenchmarkItem) -> Option<String> {
    let last = raw.lines().rev().map(str::trim).find(|l| !l.is_empty())?;
    let stripped = last.trim_matches(|c: char| c.is_ascii_punctuation() || c.is_whitespace());
    item.options.contains_key(stripped).then(|| stripped.to_string())
}

fn longest_option_text(raw: &str, item: &BenchmarkItem) -> Option<String> {
    let haystack = raw.to_lowercase();
    let hits: Vec<(&String, usize)> = item
        .options
        .iter()
        .filter(|(_, text)| !text.trim().is_empty() && haystack.contains(&text.trim().to_lowercase()))
        .map(|(label, text)| (label, text.trim().chars().count()))
        .collect();
    let best = hits.iter().map(|(_, len)| *len).max()?;
    let mut winners = hits.iter().filter(|(_, len)| *len == best);
    let first = winners.next()?;
    if winners.next().is_some() {
        return None;
    }
    Some(first.0.clone())
}

/// Final sentence of the output: the text after the last sentence break,
/// ignoring empty trailing pieces.
fn final_sentence(raw: &str) -> Option<&str> {
    raw.split(['.', '!', '?', '\n']).map(str::trim).rev().find(|s| !s.is_empty())
}

/// Maps raw model output to an option label (or yes/no/maybe). Rules in
/// priority order: an explicit "answer is (X)" / "Answer: X" (last one
/// wins), a lone label on the final line, then the unique longest option
/// text quoted in the output. `None` means unanswered.
pub fn extract_answer(raw: &str, item: &BenchmarkItem) -> Option<String> {
    match item.kind {
        ItemKind::Ynm => {
            if let Some(caps) = ANSWER_YNM.captures_iter(raw).last() {
                return Some(caps[1].to_lowercase());
            }
            let sentence = final_sentence(raw)?;
            YNM_WORD.captures(sentence).map(|c| c[1].to_lowercase())
        }
        ItemKind::Mcq | ItemKind::Ddx => explicit_label(raw, item)
            .or_else(|| lone_final_label(raw, item))
            .or_else(|| longest_option_text(raw, item)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    Direct,
    Full,
}

impl FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(Self::Direct),
            "full" => Ok(Self::Full),
            other => Err(format!("unknown pipeline mode `{other}`")),
        }
    }
}

/// Produces raw model output for one item.
#[async_trait]
pub trait Runner: Send + Sync {
    fn mode(&self) -> PipelineMode;

    async fn run(&self, item: &BenchmarkItem) -> Result<String, String>;
}

/// Question prompt with options and the requested answer format.
pub fn format_question(item: &BenchmarkItem) -> String {
    let mut text = String::new();
    for (i, ctx) in item.contexts.iter().enumerate() {
        let _ = writeln!(text, "Context {}: {ctx}", i + 1);
    }
    let _ = writeln!(text, "Question: {}", item.question);
    match item.kind {
        ItemKind::Ynm => text.push_str("Answer yes, no or maybe. End with \"The answer is <yes|no|maybe>\"."),
        ItemKind::Mcq | ItemKind::Ddx => {
            text.push_str(&format_options(item));
            text.push_str("End with \"The answer is (X)\" where X is the option label.");
        }
    }
    text
}

fn format_options(item: &BenchmarkItem) -> String {
    let mut text = String::from("Options:\n");
    for (label, option) in &item.options {
        let _ = writeln!(text, "{label}. {option}");
    }
    text
}

/// One chat call per item.
pub struct DirectRunner {
    pool: Arc<BackendPool>,
    backend: String,
}

impl DirectRunner {
    pub fn new(pool: Arc<BackendPool>, backend: impl Into<String>) -> Self {
        Self { pool, backend: backend.into() }
    }
}

#[async_trait]
impl Runner for DirectRunner {
    fn mode(&self) -> PipelineMode {
        PipelineMode::Direct
    }

    async fn run(&self, item: &BenchmarkItem) -> Result<String, String> {
        let request = ChatRequest::new(
            self.backend.clone(),
            vec![
                ChatMessage::system(format!("{ANSWER_MARKER}\nYou are a careful medical expert.")),
                ChatMessage::user(format_question(item)),
            ],
        );
        self.pool
            .call(&request)
            .await
            .map(|d| d.response.content)
            .map_err(|e| e.to_string())
    }
}

/// Runs every item as a new case through the whole engine. The options go
/// to the moderator prompt; the answer is read from the advice packet.
pub struct PipelineRunner {
    engine: Arc<Engine>,
}

impl PipelineRunner {
    pub fn new(engine: Arc<Engine>) -> Self {
        Self { engine }
    }
}

fn bench_case_id(item_id: &str) -> CaseId {
    let clean: String = item_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .take(64)
        .collect();
    let nonce = uuid::Uuid::new_v4().simple().to_string();
    CaseId::new(format!("bench-{clean}-{}", &nonce[..12]))
}

#[async_trait]
impl Runner for PipelineRunner {
    fn mode(&self) -> PipelineMode {
        PipelineMode::Full
    }

    async fn run(&self, item: &BenchmarkItem) -> Result<String, String> {
        let mut complaint = item.question.clone();
        for ctx in &item.contexts {
            complaint.push_str("\nContext: ");
            complaint.push_str(ctx);
        }
        let case = CaseRecord::new(bench_case_id(&item.id), item.lang.clone(), complaint);
        let extra = match item.kind {
            ItemKind::Ynm => "Benchmark question: give the answer as your first diagnosis label, in the form \
                              \"The answer is <yes|no|maybe>\"."
                .to_string(),
            ItemKind::Mcq | ItemKind::Ddx => format!(
                "Benchmark question.\n{}Give the chosen option as your first diagnosis label, in the form \
                 \"The answer is (X)\".",
                format_options(item)
            ),
        };
        let outcome = self
            .engine
            .run_case_detailed(case, Some(&extra))
            .await
            .map_err(|e| e.to_string())?;
        Ok(match outcome.packet {
            Some(packet) => {
                let mut lines: Vec<String> = packet.diagnoses.iter().map(|d| d.label.clone()).collect();
                lines.extend(packet.actions);
                lines.join("\n")
            }
            None => outcome.response.localized_text,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub id: String,
    pub lang: LanguageTag,
    pub gold: String,
    pub predicted: Option<String>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageStats {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub system: String,
    /// Accuracy in percent per dataset column; `None` where not reported.
    pub scores: [Option<f64>; 5],
}

pub const BASELINE_COLUMNS: [&str; 5] = ["MedQA", "PubMedQA", "Guidelines", "JAMA", "DDXPlus"];

/// Reported accuracies of reference systems, in percent. None of them were
/// measured on translated benchmarks.
pub fn baseline_rows() -> Vec<BaselineRow> {
    let row = |system: &str, scores: [Option<f64>; 5]| BaselineRow { system: system.to_string(), scores };
    vec![
        row("GPT-4", [Some(79.7), Some(67.2), Some(64.3), None, None]),
        row("Llama-3 70B", [Some(78.2), Some(67.5), Some(61.8), None, None]),
        row("MedAgents", [Some(79.1), Some(69.7), Some(54.6), Some(66.0), Some(62.8)]),
        row("MdAgents", [Some(88.7), Some(75.0), Some(65.3), Some(70.9), Some(77.9)]),
        row("Reference", [Some(78.9), Some(74.1), Some(66.8), Some(68.9), Some(76.8)]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub pipeline_mode: PipelineMode,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub unanswered: usize,
    pub runner_failures: usize,
    pub per_language: BTreeMap<String, LanguageStats>,
    pub baseline_rows: Vec<BaselineRow>,
    pub items: Vec<ItemResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no items to evaluate")]
    NoItems,
}

fn ratio(correct: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        correct as f64 / n as f64
    }
}

/// Scores every item once through `runner`, with up to `parallelism` items
/// in flight. Item order in the report follows `items`.
pub async fn evaluate(
    dataset: &str,
    items: &[BenchmarkItem],
    runner: &dyn Runner,
    parallelism: usize,
) -> Result<EvalReport, EvalError> {
    if items.is_empty() {
        return Err(EvalError::NoItems);
    }
    let results: Vec<ItemResult> = stream::iter(items)
        .map(|item| async move {
            let (predicted, error) = match runner.run(item).await {
                Ok(raw) => (extract_answer(&raw, item), None),
                Err(err) => (None, Some(err)),
            };
            ItemResult {
                id: item.id.clone(),
                lang: item.lang.clone(),
                gold: item.gold.clone(),
                correct: predicted.as_deref() == Some(item.gold.as_str()),
                predicted,
                error,
            }
        })
        .buffered(parallelism.max(1))
        .collect()
        .await;

    let n = results.len();
    let correct = results.iter().filter(|r| r.correct).count();
    let unanswered = results.iter().filter(|r| r.predicted.is_none()).count();
    let runner_failures = results.iter().filter(|r| r.error.is_some()).count();
    let mut per_language: BTreeMap<String, LanguageStats> = BTreeMap::new();
    for r in &results {
        let stats = per_language
            .entry(r.lang.to_string())
            .or_insert(LanguageStats { n: 0, correct: 0, accuracy: 0.0 });
        stats.n += 1;
        stats.correct += usize::from(r.correct);
    }
    for stats in per_language.values_mut() {
        stats.accuracy = ratio(stats.correct, stats.n);
    }
    Ok(EvalReport {
        dataset: dataset.to_string(),
        pipeline_mode: runner.mode(),
        n,
        correct,
        accuracy: ratio(correct, n),
        unanswered,
        runner_failures,
        per_language,
        baseline_rows: baseline_rows(),
        items: results,
    })
}

fn pct(value: f64) -> String {
    format!("{:.1}", value * 100.0)
}

fn column_for(dataset: &str) -> Option<usize> {
    let key = dataset.to_ascii_lowercase();
    BASELINE_COLUMNS.iter().position(|c| key.contains(&c.to_ascii_lowercase()))
}

/// Plain-text report with the baseline comparison table.
pub fn render_report(report: &EvalReport) -> String {
    let mut out = String::new();
    let mode = match report.pipeline_mode {
        PipelineMode::Direct => "direct",
        PipelineMode::Full => "full",
    };
    let _ = writeln!(out, "dataset: {}  mode: {mode}  items: {}", report.dataset, report.n);
    let _ = writeln!(
        out,
        "accuracy: {}% ({}/{})  unanswered: {}  runner failures: {}",
        pct(report.accuracy),
        report.correct,
        report.n,
        report.unanswered,
        report.runner_failures
    );
    let _ = writeln!(out, "\nper language:");
    for (lang, stats) in &report.per_language {
        let _ = writeln!(out, "  {lang:<6} n={:<5} accuracy={}%", stats.n, pct(stats.accuracy));
    }
    let _ = writeln!(out, "\nbaselines (accuracy %, indicative only: not measured on translated benchmarks)");
    let _ = write!(out, "{:<14}", "system");
    for c in BASELINE_COLUMNS {
        let _ = write!(out, "{c:>12}");
    }
    out.push('\n');
    let _ = write!(out, "{:<14}", "this run");
    let column = column_for(&report.dataset);
    for i in 0..BASELINE_COLUMNS.len() {
        let cell = if column == Some(i) { pct(report.accuracy) } else { "-".to_string() };
        let _ = write!(out, "{cell:>12}");
    }
    out.push('\n');
    for row in &report.baseline_rows {
        let _ = write!(out, "{:<14}", row.system);
        for score in row.scores {
            let cell = score.map(|s| format!("{s:.1}")).unwrap_or_else(|| "-".to_string());
            let _ = write!(out, "{cell:>12}");
        }
        out.push('\n');
    }
    out
}

//! Deterministic scripted backend.
//!
//! A script is an ordered list of entries. Each request is matched against
//! the concatenated message contents; the first entry whose matcher hits
//! answers with its next reply. Substring matchers are case-insensitive,
//! pattern matchers are regular expressions compiled case-insensitively.

use std::sync::Mutex;

use async_trait::async_trait;
use regex::{Regex, RegexBuilder};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse, FinishReason};

#[derive(Debug, Clone)]
pub enum Matcher {
    Substring(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn substring(text: &str) -> Self {
        Matcher::Substring(text.to_lowercase())
    }

    pub fn pattern(source: &str) -> Result<Self, ScriptError> {
        RegexBuilder::new(source)
            .case_insensitive(true)
            .build()
            .map(Matcher::Pattern)
            .map_err(|e| ScriptError::BadPattern(e.to_string()))
    }

    fn key(&self) -> String {
        match self {
            Matcher::Substring(s) => format!("s:{s}"),
            Matcher::Pattern(r) => format!("p:{}", r.as_str()),
        }
    }

    fn is_match(&self, transcript: &str, lowered: &str) -> bool {
        match self {
            Matcher::Substring(s) => lowered.contains(s.as_str()),
            Matcher::Pattern(r) => r.is_match(transcript),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptFault {
    Timeout,
    Transport,
    Remote(u16),
}

impl ScriptFault {
    fn to_error(self) -> BackendError {
        match self {
            ScriptFault::Timeout => BackendError::Timeout,
            ScriptFault::Transport => BackendError::Transport("scripted transport fault".into()),
            ScriptFault::Remote(status) => BackendError::Remote {
                status,
                body: "scripted remote fault".into(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Fault { fault: ScriptFault },
}

impl From<&str> for ScriptReply {
    fn from(text: &str) -> Self {
        ScriptReply::Text(text.to_string())
    }
}

impl From<String> for ScriptReply {
    fn from(text: String) -> Self {
        ScriptReply::Text(text)
    }
}

impl From<ScriptFault> for ScriptReply {
    fn from(fault: ScriptFault) -> Self {
        ScriptReply::Fault { fault }
    }
}

/// Serialized form of one script entry (config files, fixtures).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptSpec {
    #[serde(rename = "match")]
    pub matcher: String,
    #[serde(default)]
    pub regex: bool,
    pub replies: Vec<ScriptReply>,
    #[serde(default)]
    pub sticky: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("script entry needs at least one reply")]
    EmptyReplies,
    #[error("matcher `{0}` is already registered")]
    DuplicateMatcher(String),
    #[error("invalid matcher pattern: {0}")]
    BadPattern(String),
}

struct Entry {
    matcher: Matcher,
    replies: Vec<ScriptReply>,
    sticky: bool,
    next: usize,
}

#[derive(Default)]
struct State {
    entries: Vec<Entry>,
    log: Vec<ChatRequest>,
}

pub struct ScriptedBackend {
    name: String,
    state: Mutex<State>,
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let state = self.lock();
        f.debug_struct("ScriptedBackend")
            .field("name", &self.name)
            .field("entries", &state.entries.len())
            .field("calls", &state.log.len())
            .finish()
    }
}

impl ScriptedBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), state: Mutex::new(State::default()) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Appends an entry. Matching requests consume `replies` in order; once
    /// exhausted a sticky entry keeps repeating its last reply, any other
    /// entry answers `ScriptExhausted`.
    pub fn register_script(
        &self,
        matcher: Matcher,
        replies: Vec<ScriptReply>,
        sticky: bool,
    ) -> Result<(), ScriptError> {
        if replies.is_empty() {
            return Err(ScriptError::EmptyReplies);
        }
        let mut state = self.lock();
        let key = matcher.key();
        if state.entries.iter().any(|e| e.matcher.key() == key) {
            return Err(ScriptError::DuplicateMatcher(key[2..].to_string()));
        }
        state.entries.push(Entry { matcher, replies, sticky, next: 0 });
        Ok(())
    }

    pub fn register_spec(&self, spec: ScriptSpec) -> Result<(), ScriptError> {
        let matcher = if spec.regex {
            Matcher::pattern(&spec.matcher)?
        } else {
            Matcher::substring(&spec.matcher)
        };
        self.register_script(matcher, spec.replies, spec.sticky)
    }

    /// Shorthand for a case-insensitive substring entry of text replies.
    pub fn on(&self, substring: &str, replies: &[&str]) -> Result<(), ScriptError> {
        self.register_script(
            Matcher::substring(substring),
            replies.iter().map(|r| ScriptReply::from(*r)).collect(),
            false,
        )
    }

    /// Shorthand for a sticky substring entry that always returns `reply`.
    pub fn always(&self, substring: &str, reply: &str) -> Result<(), ScriptError> {
        self.register_script(Matcher::substring(substring), vec![reply.into()], true)
    }

    pub fn call_count(&self) -> usize {
        self.lock().log.len()
    }

    pub fn calls(&self) -> Vec<ChatRequest> {
        self.lock().log.clone()
    }

    /// Number of logged requests whose transcript contains `needle`
    /// (case-insensitive).
    pub fn calls_matching(&self, needle: &str) -> usize {
        let needle = needle.to_lowercase();
        self.lock()
            .log
            .iter()
            .filter(|r| r.transcript().to_lowercase().contains(&needle))
            .count()
    }
}

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[async_trait]
impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    async fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let transcript = request.transcript();
        let lowered = transcript.to_lowercase();
        let mut state = self.lock();
        state.log.push(request.clone());
        let entry = state
            .entries
            .iter_mut()
            .find(|e| e.matcher.is_match(&transcript, &lowered))
            .ok_or(BackendError::ScriptExhausted)?;
        let reply = if entry.next < entry.replies.len() {
            entry.next += 1;
            entry.replies[entry.next - 1].clone()
        } else if entry.sticky {
            entry.replies[entry.replies.len() - 1].clone()
        } else {
            return Err(BackendError::ScriptExhausted);
        };
        match reply {
            ScriptReply::Text(content) => Ok(ChatResponse {
                finish: if content.is_empty() { FinishReason::Error } else { FinishReason::Stop },
                latency_ms: 0,
                tokens_in: word_count(&transcript),
                tokens_out: word_count(&content),
                content,
            }),
            ScriptReply::Fault { fault } => Err(fault.to_error()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ChatMessage;

    fn ask(text: &str) -> ChatRequest {
        ChatRequest::new("script", vec![ChatMessage::system("sys"), ChatMessage::user(text)])
    }

    #[tokio::test]
    async fn matching_request_gets_reply_verbatim() {
        let b = ScriptedBackend::new("script");
        b.on("complexity", &[r#"{"complexity":"low"}"#]).unwrap();
        let out = b.complete(&ask("Assess the COMPLEXITY of this case")).await.unwrap();
        assert_eq!(out.content, r#"{"complexity":"low"}"#);
        assert_eq!(out.finish, FinishReason::Stop);
    }

    #[tokio::test]
    async fn replies_consumed_in_order_then_exhausted() {
        let b = ScriptedBackend::new("script");
        b.on("triage", &["r1", "r2"]).unwrap();
        assert_eq!(b.complete(&ask("triage")).await.unwrap().content, "r1");
        assert_eq!(b.complete(&ask("triage")).await.unwrap().content, "r2");
        assert_eq!(b.complete(&ask("triage")).await, Err(BackendError::ScriptExhausted));
    }

    #[tokio::test]
    async fn sticky_entry_repeats_last_reply() {
        let b = ScriptedBackend::new("script");
        b.register_script(Matcher::substring("triage"), vec!["r1".into(), "r2".into()], true)
            .unwrap();
        for expected in ["r1", "r2", "r2", "r2"] {
            assert_eq!(b.complete(&ask("triage")).await.unwrap().content, expected);
        }
    }

    #[tokio::test]
    async fn unmatched_request_is_exhausted() {
        let b = ScriptedBackend::new("script");
        b.on("triage", &["r1"]).unwrap();
        assert_eq!(b.complete(&ask("other")).await, Err(BackendError::ScriptExhausted));
        assert_eq!(b.call_count(), 1);
    }

    #[test]
    fn duplicate_and_empty_registrations_fail() {
        let b = ScriptedBackend::new("script");
        b.on("Triage", &["r1"]).unwrap();
        assert!(matches!(b.on("triage", &["r2"]), Err(ScriptError::DuplicateMatcher(_))));
        assert_eq!(b.on("x", &[]), Err(ScriptError::EmptyReplies));
        assert!(matches!(Matcher::pattern("("), Err(ScriptError::BadPattern(_))));
    }

    #[tokio::test]
    async fn faults_and_patterns() {
        let b = ScriptedBackend::new("script");
        b.register_script(
            Matcher::pattern(r"(?s)task: specialist.*cardiology").unwrap(),
            vec![ScriptFault::Timeout.into()],
            true,
        )
        .unwrap();
        b.always("task: specialist", "fine").unwrap();
        let err = b.complete(&ask("Task: specialist\nrole cardiology")).await.unwrap_err();
        assert_eq!(err, BackendError::Timeout);
        let ok = b.complete(&ask("Task: specialist\nrole neurology")).await.unwrap();
        assert_eq!(ok.content, "fine");
    }

    #[test]
    fn spec_json_shapes() {
        let specs: Vec<ScriptSpec> = serde_json::from_str(
            r#"[{"match":"triage","replies":["a",{"fault":"timeout"},{"fault":{"remote":503}}],"sticky":true},
                {"match":"^x$","regex":true,"replies":["b"]}]"#,
        )
        .unwrap();
        assert_eq!(specs[0].replies[1], ScriptReply::Fault { fault: ScriptFault::Timeout });
        assert_eq!(specs[0].replies[2], ScriptReply::Fault { fault: ScriptFault::Remote(503) });
        assert!(specs[1].regex && !specs[1].sticky);
    }

    #[tokio::test]
    async fn identical_scripts_replay_identically() {
        let make = || {
            let b = ScriptedBackend::new("script");
            b.on("a", &["1", "2", "3"]).unwrap();
            b.always("b", "x").unwrap();
            b
        };
        let inputs = ["a", "b", "a", "zz", "b", "a", "a"];
        let mut runs = Vec::new();
        for _ in 0..2 {
            let b = make();
            let mut out = Vec::new();
            for i in inputs {
                out.push(format!("{:?}", b.complete(&ask(i)).await));
            }
            runs.push(out);
        }
        assert_eq!(runs[0], runs[1]);
    }
}

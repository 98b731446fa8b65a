//! Per-case orchestration of the five stages, session bookkeeping and the
//! audit trail.

pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::backend::{AgentRoutes, BackendPool, ChatMessage, ChatRequest};
use crate::clock::Clock;
use crate::config::{ConfigError, Settings};
use crate::council::{
    aggregate_opinions, contributing_roles, deliberate, plan_team, synthesize_advice, CouncilError,
};
use crate::domain::{
    escalate, payload_digest, validate_case, AdvicePacket, CaseFacts, CaseId, CaseRecord, ComplexityLevel,
    Diagnosis, LanguageTag, PipelineEvent, Stage, TriageResult, ValidationReport,
};
use crate::refine::{
    redact_pii, render_steps, screen_injection, screen_input, simplify_advice, Decision, GuardrailRuleset,
    GuardrailVerdict,
};
use crate::text::first_json_object;
use crate::translation::{
    translate, BackendTranslator, IdentityTranslator, TranslationEngine, TranslationJob, Translator,
};
use crate::triage::{assess_complexity, TriageConfig, TriagePromptTemplate};

pub use store::{FileStore, StoreError};

pub const REFERRAL_MARKER: &str = "Task: referral note";
pub const REFERRAL_DESTINATION: &str = "Regional Health Center";
const UNDETERMINED: &str = "undetermined, needs clinician review";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Open,
    Referred,
    Blocked,
    Closed,
}

impl SessionStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Open => "open",
            SessionStatus::Referred => "referred",
            SessionStatus::Blocked => "blocked",
            SessionStatus::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub case_id: CaseId,
    pub localized_text: String,
    pub steps: Vec<String>,
    pub complexity: ComplexityLevel,
    pub referral: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub referral_reason: Option<String>,
    pub blocked: bool,
    pub event_range: (u64, u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// Redacted worker text as received.
    pub inbound_text: String,
    /// Pivot-language rendering, absent when the turn stopped before it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pivot_text: Option<String>,
    pub response: FinalResponse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseSession {
    pub case: CaseRecord,
    pub turns: Vec<TurnRecord>,
    pub current_level: ComplexityLevel,
    pub status: SessionStatus,
    pub next_seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_event_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("case failed validation")]
    InvalidCase(ValidationReport),
    #[error("turn text is empty")]
    EmptyTurn,
    #[error("case {0} already exists")]
    DuplicateCase(CaseId),
    #[error("unknown case {0}")]
    UnknownCase(CaseId),
    #[error("case {case_id} is {} and accepts no further turns", status.as_str())]
    ClosedSession { case_id: CaseId, status: SessionStatus },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// The response plus the advice packet behind it, for callers that score
/// the diagnostic content directly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub response: FinalResponse,
    pub packet: Option<AdvicePacket>,
}

struct TurnContext {
    case_id: CaseId,
    first_seq: u64,
    next_seq: u64,
    last_ts: Option<DateTime<Utc>>,
    events: Vec<PipelineEvent>,
}

impl TurnContext {
    fn new(session: &CaseSession) -> Self {
        Self {
            case_id: session.case.case_id.clone(),
            first_seq: session.next_seq,
            next_seq: session.next_seq,
            last_ts: session.last_event_at,
            events: Vec::new(),
        }
    }

    fn emit(&mut self, stage: Stage, detail: Value, clock: &dyn Clock, ruleset: &GuardrailRuleset) {
        let detail = redact_value(detail, ruleset);
        let mut timestamp = clock.now();
        if let Some(last) = self.last_ts {
            timestamp = timestamp.max(last);
        }
        self.last_ts = Some(timestamp);
        self.events.push(PipelineEvent {
            case_id: self.case_id.clone(),
            seq: self.next_seq,
            stage,
            timestamp,
            payload_digest: payload_digest(&detail),
            detail,
        });
        self.next_seq += 1;
    }

    /// Range the turn will span once the terminal event is emitted.
    fn range_with_terminal(&self) -> (u64, u64) {
        (self.first_seq, self.next_seq)
    }
}

fn redact_value(value: Value, ruleset: &GuardrailRuleset) -> Value {
    match value {
        Value::String(s) => Value::String(redact_pii(&s, ruleset).0),
        Value::Array(items) => Value::Array(items.into_iter().map(|v| redact_value(v, ruleset)).collect()),
        Value::Object(map) => Value::Object(map.into_iter().map(|(k, v)| (k, redact_value(v, ruleset))).collect()),
        other => other,
    }
}

fn to_value<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).unwrap_or(Value::Null)
}

fn packet_detail(packet: &AdvicePacket, source: &str) -> Value {
    // Contributing roles are recorded with the council event only.
    json!({
        "source": source,
        "diagnoses": packet.diagnoses,
        "actions": packet.actions,
        "referral": packet.referral,
        "referral_reason": packet.referral_reason,
    })
}

enum Route {
    Advise(AdvicePacket),
    Refer { reason_hint: Option<String> },
}

struct TurnResult {
    response: FinalResponse,
    pivot_text: Option<String>,
    packet: Option<AdvicePacket>,
    status: SessionStatus,
}

pub struct Engine {
    settings: Settings,
    pool: Arc<BackendPool>,
    template: TriagePromptTemplate,
    translator: Arc<dyn Translator>,
    store: FileStore,
    clock: Arc<dyn Clock>,
    locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

impl Engine {
    /// Builds an engine over an explicit backend pool.
    pub fn new(settings: Settings, pool: BackendPool) -> Result<Self, ConfigError> {
        let template = TriagePromptTemplate::with_defaults(&settings.red_flags)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let store = FileStore::open(&settings.storage_dir)
            .map_err(|e| ConfigError::Invalid(format!("storage: {e}")))?;
        let clock = pool.clock().clone();
        let pool = Arc::new(pool);
        let translator: Arc<dyn Translator> = match settings.translation_mode {
            TranslationEngine::Dictionary => Arc::new(settings.dictionary.clone()),
            TranslationEngine::Backend => Arc::new(BackendTranslator::new(
                pool.clone(),
                settings.routes.backend_for(AgentRoutes::TRANSLATOR),
            )),
            TranslationEngine::Identity => Arc::new(IdentityTranslator),
        };
        Ok(Self { settings, pool, template, translator, store, clock, locks: Mutex::new(HashMap::new()) })
    }

    /// Builds the pool from the configured backends.
    pub fn from_settings(settings: Settings, clock: Arc<dyn Clock>) -> Result<Self, ConfigError> {
        let pool = settings.build_pool(clock)?;
        Self::new(settings, pool)
    }

    pub fn settings(&self) -> &Settings {
        &self.settings
    }

    pub fn pool(&self) -> &Arc<BackendPool> {
        &self.pool
    }

    pub fn store(&self) -> &FileStore {
        &self.store
    }

    /// Routed backends that the pool cannot serve.
    pub fn missing_backends(&self) -> Vec<String> {
        let mut missing: Vec<String> = self
            .settings
            .routes
            .referenced()
            .filter(|name| !self.pool.contains(name))
            .map(String::from)
            .collect();
        missing.sort();
        missing.dedup();
        missing
    }

    fn lock_for(&self, case_id: &CaseId) -> Arc<tokio::sync::Mutex<()>> {
        self.locks
            .lock()
            .expect("lock table")
            .entry(case_id.to_string())
            .or_default()
            .clone()
    }

    pub fn load_session(&self, case_id: &CaseId) -> Result<CaseSession, EngineError> {
        self.store
            .load_session(case_id)?
            .ok_or_else(|| EngineError::UnknownCase(case_id.clone()))
    }

    pub fn events(&self, case_id: &CaseId) -> Result<Vec<PipelineEvent>, EngineError> {
        if !self.store.contains(case_id) {
            return Err(EngineError::UnknownCase(case_id.clone()));
        }
        Ok(self.store.load_events(case_id)?)
    }

    /// Opens a session for a new case and runs its first turn.
    pub async fn run_case(&self, case: CaseRecord) -> Result<FinalResponse, EngineError> {
        Ok(self.run_case_detailed(case, None).await?.response)
    }

    /// As [`Engine::run_case`]; `synthesis_extra` is appended to the
    /// moderator prompt.
    pub async fn run_case_detailed(
        &self,
        case: CaseRecord,
        synthesis_extra: Option<&str>,
    ) -> Result<CaseOutcome, EngineError> {
        let report = validate_case(&case);
        if !report.is_valid() {
            return Err(EngineError::InvalidCase(report));
        }
        let lock = self.lock_for(&case.case_id);
        let _guard = lock.lock().await;
        if self.store.contains(&case.case_id) {
            return Err(EngineError::DuplicateCase(case.case_id));
        }
        let raw_text = case.complaint_text.clone();
        let ruleset = &self.settings.ruleset;
        let mut stored = case;
        stored.complaint_text = redact_pii(&stored.complaint_text, ruleset).0;
        stored.history = stored.history.iter().map(|h| redact_pii(h, ruleset).0).collect();
        let mut session = CaseSession {
            case: stored,
            turns: Vec::new(),
            current_level: ComplexityLevel::Low,
            status: SessionStatus::Open,
            next_seq: 0,
            last_event_at: None,
        };
        self.turn(&mut session, &raw_text, synthesis_extra).await
    }

    /// Runs a follow-up turn on an open session.
    pub async fn handle_turn(&self, case_id: &CaseId, text: &str) -> Result<FinalResponse, EngineError> {
        if text.trim().is_empty() {
            return Err(EngineError::EmptyTurn);
        }
        let lock = self.lock_for(case_id);
        let _guard = lock.lock().await;
        let mut session = self.load_session(case_id)?;
        if session.status != SessionStatus::Open {
            return Err(EngineError::ClosedSession { case_id: case_id.clone(), status: session.status });
        }
        Ok(self.turn(&mut session, text, None).await?.response)
    }

    async fn turn(
        &self,
        session: &mut CaseSession,
        raw_text: &str,
        synthesis_extra: Option<&str>,
    ) -> Result<CaseOutcome, EngineError> {
        let mut ctx = TurnContext::new(session);
        let (inbound, _) = redact_pii(raw_text, &self.settings.ruleset);
        let result = self.execute(session, &mut ctx, &inbound, synthesis_extra).await;
        session.turns.push(TurnRecord {
            inbound_text: inbound,
            pivot_text: result.pivot_text.clone(),
            response: result.response.clone(),
        });
        session.status = result.status;
        session.next_seq = ctx.next_seq;
        session.last_event_at = ctx.last_ts;
        self.store.append_all(&session.case.case_id, &ctx.events)?;
        self.store.save_session(session)?;
        Ok(CaseOutcome { response: result.response, packet: result.packet })
    }

    fn emit(&self, ctx: &mut TurnContext, stage: Stage, detail: Value) {
        ctx.emit(stage, detail, self.clock.as_ref(), &self.settings.ruleset);
    }

    async fn execute(
        &self,
        session: &mut CaseSession,
        ctx: &mut TurnContext,
        inbound: &str,
        synthesis_extra: Option<&str>,
    ) -> TurnResult {
        let ruleset = &self.settings.ruleset;
        let routes = &self.settings.routes;
        let language = session.case.language.clone();
        let turn_index = session.turns.len() + 1;

        self.emit(
            ctx,
            Stage::Received,
            json!({"turn": turn_index, "language": language, "text": inbound}),
        );

        let injection = screen_injection(inbound, ruleset);
        self.emit(ctx, Stage::InputScreen, json!({"verdict": injection}));
        if injection.is_block() {
            return self.blocked(session, ctx, Stage::InputScreen, &injection, None);
        }

        // Inbound translation followed by the pivot-text screen.
        let pivot = self.to_pivot(inbound, &language).await;
        let (pivot_text, pivot_screen) = match &pivot {
            Ok((text, _)) => {
                let text = redact_pii(text, ruleset).0;
                let verdict = screen_input(&text, ruleset);
                (Some(text), Some(verdict))
            }
            Err(_) => (None, None),
        };
        self.emit(
            ctx,
            Stage::TranslateIn,
            match &pivot {
                Ok((_, detail)) => json!({
                    "translation": detail,
                    "pivot_text": pivot_text,
                    "pivot_screen": pivot_screen,
                }),
                Err(err) => json!({"error": err}),
            },
        );
        if let Some(verdict) = pivot_screen.as_ref().filter(|v| v.is_block()) {
            return self.blocked(session, ctx, Stage::TranslateIn, verdict, pivot_text);
        }
        let emergency = pivot_screen.as_ref().filter(|v| v.decision == Decision::Transform);
        let working_text = match (&pivot_text, emergency) {
            (Some(text), Some(verdict)) => verdict.apply(text).to_string(),
            (Some(text), None) => text.clone(),
            (None, _) => inbound.to_string(),
        };
        let mut facts = CaseFacts::new(&session.case, working_text.clone());
        facts.earlier_turns = session.turns.iter().filter_map(|t| t.pivot_text.clone()).collect();

        // Triage.
        let (triage, triage_detail) = if let Err(err) = &pivot {
            let result = TriageResult::fail_safe();
            let detail = json!({"source": "translation_failure", "error": err, "result": result, "backend_calls": 0});
            (result, detail)
        } else if let Some(verdict) = emergency {
            let result = TriageResult {
                level: ComplexityLevel::High,
                rationale: format!("emergency pattern: {}", verdict.reasons.join(", ")),
                red_flags: verdict.reasons.clone(),
                confidence: 1.0,
            };
            let detail = json!({"source": "emergency", "result": result, "backend_calls": 0});
            (result, detail)
        } else {
            let config = TriageConfig {
                attempts: self.settings.triage_attempts,
                backend: routes.backend_for(AgentRoutes::TRIAGE).to_string(),
            };
            let assessment = assess_complexity(&facts, &self.template, &self.pool, &config).await;
            let mut detail = to_value(&assessment);
            detail["source"] = json!("model");
            (assessment.result, detail)
        };
        session.current_level = escalate(session.current_level, triage.level);
        let mut detail = triage_detail;
        detail["session_level"] = json!(session.current_level);
        self.emit(ctx, Stage::Triage, detail);

        // Routing: the session level, not this turn's level, decides.
        let route = if session.current_level == ComplexityLevel::High {
            Route::Refer { reason_hint: pivot.as_ref().err().map(|_| format!("translation unavailable for {language}")) }
        } else {
            self.council(session, ctx, &facts, &triage, synthesis_extra).await
        };
        let packet = match route {
            Route::Advise(packet) => packet,
            Route::Refer { reason_hint } => {
                session.current_level = ComplexityLevel::High;
                let (packet, fallback) = self.referral_packet(&facts, &triage, reason_hint).await;
                let source = if fallback { "referral_fallback" } else { "referral" };
                self.emit(ctx, Stage::Synthesize, packet_detail(&packet, source));
                packet
            }
        };

        // Simplification and the output screen.
        let moderation = ruleset.moderation_endpoint().map(|m| (self.pool.as_ref(), m.name.as_str()));
        let simplified = simplify_advice(
            &packet,
            &self.pool,
            routes.backend_for(AgentRoutes::SIMPLIFIER),
            ruleset,
            &self.settings.simplify,
            moderation,
        )
        .await;
        self.emit(
            ctx,
            Stage::Simplify,
            json!({
                "steps": simplified.advice.steps,
                "readability_grade": simplified.advice.readability_grade,
                "readability_exceeded": simplified.readability_exceeded,
                "reprompted": simplified.reprompted,
                "fallback": simplified.fallback,
            }),
        );
        self.emit(ctx, Stage::OutputScreen, json!({"verdict": simplified.screen}));
        if simplified.screen.is_block() {
            return self.blocked(session, ctx, Stage::OutputScreen, &simplified.screen, pivot_text);
        }

        // Outbound localization, piece by piece.
        let mut pieces = simplified.advice.steps.clone();
        pieces.extend(simplified.advice.disclaimers.iter().cloned());
        pieces.extend(packet.referral_reason.iter().cloned());
        let (localized, out_detail) = self.localize_pieces(&pieces, &language).await;
        let n_steps = simplified.advice.steps.len();
        let n_disclaimers = simplified.advice.disclaimers.len();
        let steps: Vec<String> = localized[..n_steps].to_vec();
        let disclaimers = &localized[n_steps..n_steps + n_disclaimers];
        let referral_reason = localized.get(n_steps + n_disclaimers).cloned();
        self.emit(ctx, Stage::TranslateOut, json!({"translation": out_detail, "steps": steps}));

        let mut text = render_steps(&steps);
        for d in disclaimers {
            if !text.is_empty() {
                text.push_str("\n\n");
            }
            text.push_str(d);
        }
        let referral = packet.referral;
        let response = FinalResponse {
            case_id: session.case.case_id.clone(),
            localized_text: redact_pii(&text, ruleset).0,
            steps: steps.iter().map(|s| redact_pii(s, ruleset).0).collect(),
            complexity: session.current_level,
            referral,
            referral_reason: if referral { referral_reason.map(|r| redact_pii(&r, ruleset).0) } else { None },
            blocked: false,
            event_range: ctx.range_with_terminal(),
        };
        let terminal = if referral { Stage::Referred } else { Stage::Delivered };
        self.emit(ctx, terminal, json!({"response": response}));
        TurnResult {
            response,
            pivot_text,
            packet: Some(packet),
            status: if referral { SessionStatus::Referred } else { SessionStatus::Open },
        }
    }

    async fn council(
        &self,
        session: &CaseSession,
        ctx: &mut TurnContext,
        facts: &CaseFacts,
        triage: &TriageResult,
        synthesis_extra: Option<&str>,
    ) -> Route {
        let routes = &self.settings.routes;
        let routed = TriageResult { level: session.current_level, ..triage.clone() };
        let selector = Some((self.pool.as_ref(), routes.backend_for(AgentRoutes::SELECTOR)));
        let plan = match plan_team(&routed, facts, &self.settings.council, &self.settings.roster, selector).await {
            Ok(plan) => plan,
            Err(err) => {
                tracing::error!("team planning failed: {err}");
                return Route::Refer { reason_hint: Some("no care team could be formed".into()) };
            }
        };
        let deliberation = deliberate(plan, facts, &self.pool, routes).await;
        let opinions = deliberation.final_opinions().to_vec();
        let consensus = aggregate_opinions(&opinions);
        let roles = match &consensus {
            Ok(c) => contributing_roles(&opinions, &c.winner),
            Err(_) => Vec::new(),
        };
        self.emit(
            ctx,
            Stage::Council,
            json!({
                "strategy": deliberation.plan.strategy,
                "roles": deliberation.plan.roles,
                "rounds": deliberation.plan.rounds,
                "opinions": deliberation.rounds,
                "consensus": consensus.as_ref().ok(),
                "error": consensus.as_ref().err().map(CouncilError::to_string),
                "contributing_roles": roles,
            }),
        );
        let consensus = match consensus {
            Ok(c) => c,
            Err(_) => {
                return Route::Refer { reason_hint: Some("the care team could not reach an opinion".into()) };
            }
        };
        let synthesis = synthesize_advice(
            facts,
            &consensus,
            &opinions,
            &self.pool,
            routes.backend_for(AgentRoutes::MODERATOR),
            synthesis_extra,
        )
        .await;
        let mut packet = synthesis.packet;
        // The council path never refers; a moderator's referral advice
        // becomes an action for the worker instead.
        if let Some(reason) = packet.referral_reason.take() {
            packet.referral = false;
            packet.actions.push(format!("Arrange review at the {REFERRAL_DESTINATION}: {reason}"));
        }
        let source = if synthesis.fallback { "mechanical" } else { "moderator" };
        self.emit(ctx, Stage::Synthesize, packet_detail(&packet, source));
        Route::Advise(packet)
    }

    async fn referral_packet(
        &self,
        facts: &CaseFacts,
        triage: &TriageResult,
        reason_hint: Option<String>,
    ) -> (AdvicePacket, bool) {
        let system = format!(
            "{REFERRAL_MARKER}\nYou are the general practitioner who triaged this case. It must go to the \
             {REFERRAL_DESTINATION}. Write a short referral note for the health worker.\n\
             Answer with a JSON object: {{\"reason\": string, \"actions\": [string], \"working_diagnosis\": string}}"
        );
        let mut user = format!("Case facts:\n{}\nTriage rationale: {}\n", facts.render(), triage.rationale);
        if !triage.red_flags.is_empty() {
            user.push_str(&format!("Red flags: {}\n", triage.red_flags.join(", ")));
        }
        let request = ChatRequest::new(
            self.settings.routes.referral_backend(),
            vec![ChatMessage::system(system), ChatMessage::user(user)],
        );
        let parsed = match self.pool.call(&request).await {
            Ok(delivered) => first_json_object(&delivered.response.content).and_then(|obj| {
                let reason = obj.get("reason")?.as_str()?.trim().to_string();
                if reason.is_empty() {
                    return None;
                }
                let actions: Vec<String> = obj
                    .get("actions")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(String::from).collect())
                    .unwrap_or_default();
                let dx = obj
                    .get("working_diagnosis")
                    .and_then(Value::as_str)
                    .map(str::trim)
                    .filter(|d| !d.is_empty())
                    .unwrap_or(UNDETERMINED)
                    .to_string();
                Some((reason, actions, dx))
            }),
            Err(err) => {
                tracing::warn!("referral note call failed: {err}");
                None
            }
        };
        let fallback = parsed.is_none();
        let (reason, mut actions, dx) = parsed.unwrap_or_else(|| {
            let why = reason_hint.clone().unwrap_or_else(|| {
                if triage.red_flags.is_empty() {
                    triage.rationale.clone()
                } else {
                    triage.red_flags.join(", ")
                }
            });
            let reason = format!("refer to {REFERRAL_DESTINATION}: {why}");
            (reason.clone(), vec![reason], UNDETERMINED.to_string())
        });
        if actions.is_empty() {
            actions.push(reason.clone());
        }
        let packet = AdvicePacket::new(
            vec![Diagnosis { label: dx, confidence: triage.confidence }],
            actions,
            Some(reason),
            Vec::new(),
        )
        .expect("referral packet has a diagnosis");
        (packet, fallback)
    }

    async fn to_pivot(&self, text: &str, language: &LanguageTag) -> Result<(String, Value), String> {
        if language.is_pivot() {
            return Ok((text.to_string(), json!({"engine": "none"})));
        }
        let job = TranslationJob::new(text, language.clone(), LanguageTag::pivot());
        match translate(&job, &self.settings.glossary, self.translator.as_ref()).await {
            Ok(result) => Ok((
                result.text,
                json!({"engine": result.engine, "glossary_hits": result.glossary_hits}),
            )),
            Err(err) => Err(err.to_string()),
        }
    }

    /// Localizes each piece separately. Any failure keeps the pivot text for
    /// every piece so the response stays internally consistent.
    async fn localize_pieces(&self, pieces: &[String], language: &LanguageTag) -> (Vec<String>, Value) {
        if language.is_pivot() {
            return (pieces.to_vec(), json!({"engine": "none"}));
        }
        let mut out = Vec::with_capacity(pieces.len());
        for piece in pieces {
            if piece.trim().is_empty() {
                out.push(piece.clone());
                continue;
            }
            let job = TranslationJob::new(piece.clone(), LanguageTag::pivot(), language.clone());
            match translate(&job, &self.settings.glossary, self.translator.as_ref()).await {
                Ok(result) => out.push(result.text),
                Err(err) => {
                    tracing::warn!("outbound translation failed: {err}");
                    return (
                        pieces.to_vec(),
                        json!({"engine": self.translator.engine(), "fallback": true, "error": err.to_string()}),
                    );
                }
            }
        }
        (out, json!({"engine": self.translator.engine(), "fallback": false}))
    }

    fn blocked(
        &self,
        session: &CaseSession,
        ctx: &mut TurnContext,
        at: Stage,
        verdict: &GuardrailVerdict,
        pivot_text: Option<String>,
    ) -> TurnResult {
        let response = FinalResponse {
            case_id: session.case.case_id.clone(),
            localized_text: self.settings.safe_response(&session.case.language).to_string(),
            steps: Vec::new(),
            complexity: session.current_level,
            referral: false,
            referral_reason: None,
            blocked: true,
            event_range: ctx.range_with_terminal(),
        };
        self.emit(
            ctx,
            Stage::Blocked,
            json!({"at": at, "reasons": verdict.reasons, "response": response}),
        );
        TurnResult { response, pivot_text, packet: None, status: SessionStatus::Blocked }
    }
}

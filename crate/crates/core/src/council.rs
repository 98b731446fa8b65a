//! Adaptive expert network for Low and Medium cases.
//!
//! Low complexity gets a single primary-care agent. Medium complexity gets a
//! multidisciplinary team that deliberates over a fixed number of rounds,
//! each member seeing the previous round's opinions. High complexity never
//! reaches this module; the pipeline refers it instead.

use std::collections::BTreeMap;
use std::path::Path;

use futures::future::join_all;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{AgentRoutes, BackendPool, ChatMessage, ChatRequest};
use crate::domain::{AdvicePacket, CaseFacts, ComplexityLevel, Diagnosis, TriageResult};
use crate::text::{first_json_array, first_json_object, normalize_label};

pub const SPECIALIST_MARKER: &str = "Task: specialist opinion";
pub const MODERATOR_MARKER: &str = "Task: moderator synthesis";
pub const SELECTOR_MARKER: &str = "Task: select specialists";
pub const SOLO_ROLE: &str = "primary_care";
pub const NO_OPINION: &str = "no-opinion";

pub const DEFAULT_TEAM_SIZE: usize = 6;
/// Smaller team used for the four-agent comparison run.
pub const ABLATION_TEAM_SIZE: usize = 4;
pub const DEFAULT_ROUNDS: u32 = 2;
pub const DEFAULT_MAX_TEAM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Solo,
    Mdt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamPlan {
    pub strategy: Strategy,
    pub roles: Vec<String>,
    pub rounds: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    pub role: String,
    pub diagnosis: String,
    pub confidence: f64,
    pub plan: Vec<String>,
    pub round: u32,
}

impl Opinion {
    pub fn no_opinion(role: &str, round: u32) -> Self {
        Self {
            role: role.to_string(),
            diagnosis: NO_OPINION.to_string(),
            confidence: 0.0,
            plan: Vec::new(),
            round,
        }
    }

    pub fn is_no_opinion(&self) -> bool {
        normalize_label(&self.diagnosis) == NO_OPINION
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    Keyword,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CouncilConfig {
    pub team_size: usize,
    pub rounds: u32,
    pub max_team: usize,
    pub selection: SelectionMode,
}

impl Default for CouncilConfig {
    fn default() -> Self {
        Self {
            team_size: DEFAULT_TEAM_SIZE,
            rounds: DEFAULT_ROUNDS,
            max_team: DEFAULT_MAX_TEAM,
            selection: SelectionMode::Keyword,
        }
    }
}

impl CouncilConfig {
    pub fn validate(&self, roster: &Roster) -> Result<(), CouncilError> {
        if self.team_size < 2 || self.team_size > self.max_team {
            return Err(CouncilError::InvalidTeamSize { size: self.team_size, max: self.max_team });
        }
        if self.team_size > roster.len() {
            return Err(CouncilError::TeamExceedsRoster { k: self.team_size, roster: roster.len() });
        }
        if self.rounds == 0 {
            return Err(CouncilError::NoRounds);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CouncilError {
    #[error("high-complexity cases are referred, not deliberated")]
    HighComplexityRejected,
    #[error("team size {size} must be between 2 and {max}")]
    InvalidTeamSize { size: usize, max: usize },
    #[error("cannot select {k} specialists from a roster of {roster}")]
    TeamExceedsRoster { k: usize, roster: usize },
    #[error("council needs at least one round")]
    NoRounds,
    #[error("roster is empty")]
    EmptyRoster,
    #[error("no specialist produced a usable opinion")]
    AggregationEmpty,
    #[error("cannot load roster: {0}")]
    Io(String),
}

/// Specialist roles and the complaint keywords that suggest them, in
/// priority order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Roster(IndexMap<String, Vec<String>>);

impl Roster {
    pub fn new(roles: IndexMap<String, Vec<String>>) -> Result<Self, CouncilError> {
        if roles.is_empty() {
            return Err(CouncilError::EmptyRoster);
        }
        Ok(Self(roles))
    }

    pub fn load(path: &Path) -> Result<Self, CouncilError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| CouncilError::Io(format!("{}: {e}", path.display())))?;
        let roles = serde_json::from_str(&raw)
            .map_err(|e| CouncilError::Io(format!("{}: {e}", path.display())))?;
        Self::new(roles)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.0.keys().map(String::as_str)
    }

    fn contains(&self, role: &str) -> bool {
        self.0.contains_key(role)
    }
}

impl Default for Roster {
    fn default() -> Self {
        let entries: [(&str, &[&str]); 8] = [
            ("internal_medicine", &["fatigue", "weight loss", "diabetes", "hypertension", "weakness"]),
            ("infectious_disease", &["fever", "chills", "infection", "malaria", "dengue", "typhoid"]),
            ("pulmonology", &["cough", "breath", "wheeze", "sputum", "asthma", "tuberculosis"]),
            ("cardiology", &["chest", "palpitation", "heart", "swelling of the legs", "blood pressure"]),
            ("gastroenterology", &["abdominal", "stomach", "diarrhea", "diarrhoea", "vomiting", "jaundice"]),
            ("endocrinology", &["thirst", "thyroid", "sugar", "insulin", "goitre"]),
            ("pediatrics", &["child", "infant", "baby", "newborn", "toddler"]),
            ("obstetrics_gynecology", &["pregnant", "pregnancy", "menstrual", "period", "vaginal"]),
        ];
        Self(
            entries
                .iter()
                .map(|(role, words)| (role.to_string(), words.iter().map(|w| w.to_string()).collect()))
                .collect(),
        )
    }
}

fn keyword_hits(haystack: &str, keyword: &str) -> usize {
    let needle = keyword.to_lowercase();
    if needle.is_empty() {
        return 0;
    }
    let bytes = haystack.as_bytes();
    haystack
        .match_indices(&needle)
        .filter(|(i, _)| *i == 0 || !bytes[i - 1].is_ascii_alphanumeric())
        .count()
}

/// Keyword scoring: each role scores the number of keyword occurrences in
/// the complaint; the top `k` are taken, ties and all-zero scores falling
/// back to roster order.
pub fn select_by_keywords(complaint: &str, k: usize, roster: &Roster) -> Result<Vec<String>, CouncilError> {
    if k > roster.len() {
        return Err(CouncilError::TeamExceedsRoster { k, roster: roster.len() });
    }
    let text = complaint.to_lowercase();
    let mut scored: Vec<(usize, usize, &str)> = roster
        .0
        .iter()
        .enumerate()
        .map(|(idx, (role, words))| {
            let score = words.iter().map(|w| keyword_hits(&text, w)).sum();
            (score, idx, role.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(k).map(|(_, _, role)| role.to_string()).collect())
}

fn parse_role_list(raw: &str, k: usize, roster: &Roster) -> Option<Vec<String>> {
    let items = first_json_object(raw)
        .and_then(|o| o.get("roles").and_then(Value::as_array).cloned())
        .or_else(|| first_json_array(raw))?;
    let mut roles = Vec::new();
    for item in items {
        let role = item.as_str()?.trim().to_string();
        if !roster.contains(&role) || roles.contains(&role) {
            return None;
        }
        roles.push(role);
    }
    (roles.len() == k).then_some(roles)
}

/// Picks `k` specialists. In model mode the selector backend chooses from
/// the roster; any unusable answer falls back to keyword scoring.
pub async fn select_specialists(
    complaint: &str,
    k: usize,
    roster: &Roster,
    selector: Option<(&BackendPool, &str)>,
) -> Result<Vec<String>, CouncilError> {
    if k > roster.len() {
        return Err(CouncilError::TeamExceedsRoster { k, roster: roster.len() });
    }
    if let Some((pool, backend)) = selector {
        let system = format!(
            "{SELECTOR_MARKER}\nChoose exactly {k} distinct specialist roles for a multidisciplinary team \
             from this list: {}.\nAnswer with a JSON object: {{\"roles\": [string]}}",
            roster.roles().collect::<Vec<_>>().join(", ")
        );
        let request = ChatRequest::new(
            backend,
            vec![ChatMessage::system(system), ChatMessage::user(format!("Complaint: {complaint}"))],
        );
        if let Ok(delivered) = pool.call(&request).await {
            if let Some(roles) = parse_role_list(&delivered.response.content, k, roster) {
                return Ok(roles);
            }
        }
        tracing::debug!("specialist selection answer unusable; using keyword scoring");
    }
    select_by_keywords(complaint, k, roster)
}

/// Chooses the collaboration strategy for a triaged case.
pub async fn plan_team(
    triage: &TriageResult,
    facts: &CaseFacts,
    config: &CouncilConfig,
    roster: &Roster,
    selector: Option<(&BackendPool, &str)>,
) -> Result<TeamPlan, CouncilError> {
    match triage.level {
        ComplexityLevel::High => Err(CouncilError::HighComplexityRejected),
        ComplexityLevel::Low => Ok(TeamPlan {
            strategy: Strategy::Solo,
            roles: vec![SOLO_ROLE.to_string()],
            rounds: 1,
        }),
        ComplexityLevel::Medium => {
            config.validate(roster)?;
            let selector = selector.filter(|_| config.selection == SelectionMode::Model);
            let roles = select_specialists(&facts.complaint, config.team_size, roster, selector).await?;
            Ok(TeamPlan { strategy: Strategy::Mdt, roles, rounds: config.rounds })
        }
    }
}

fn specialist_prompt(facts: &CaseFacts, role: &str, prior: &[Opinion], solo: bool) -> (String, String) {
    let persona = if solo {
        "You are the primary care provider handling this case on your own.".to_string()
    } else {
        format!("You are the {} specialist on a multidisciplinary team.", role.replace('_', " "))
    };
    let system = format!(
        "{SPECIALIST_MARKER}\nRole: {role}\n{persona} You advise a rural health worker. \
         Give the most likely diagnosis and a short plan of actions.\n\
         Answer with a JSON object: {{\"diagnosis\": string, \"confidence\": number between 0 and 1, \"plan\": [string]}}"
    );
    let mut user = format!("Case facts:\n{}", facts.render());
    if !prior.is_empty() {
        user.push_str("\nOpinions from the previous round:\n");
        for op in prior {
            user.push_str(&format!(
                "- {} (round {}): {} (confidence {:.2}); plan: {}\n",
                op.role,
                op.round,
                op.diagnosis,
                op.confidence,
                op.plan.join("; ")
            ));
        }
    }
    (system, user)
}

fn string_list(value: Option<&Value>) -> Vec<String> {
    match value {
        Some(Value::Array(items)) => items
            .iter()
            .filter_map(Value::as_str)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
        Some(Value::String(s)) if !s.trim().is_empty() => vec![s.trim().to_string()],
        _ => Vec::new(),
    }
}

fn parse_opinion(raw: &str, role: &str, round: u32) -> Option<Opinion> {
    let obj = first_json_object(raw)?;
    let diagnosis = obj.get("diagnosis")?.as_str()?.trim().to_string();
    if diagnosis.is_empty() {
        return None;
    }
    let confidence = obj
        .get("confidence")
        .and_then(Value::as_f64)
        .unwrap_or(0.5)
        .clamp(0.0, 1.0);
    Some(Opinion {
        role: role.to_string(),
        diagnosis,
        confidence,
        plan: string_list(obj.get("plan")),
        round,
    })
}

/// One deliberation round. Calls for all roles run concurrently; the output
/// keeps `roles` order. Unusable output or a failed backend yields a
/// no-opinion placeholder for that role.
pub async fn run_round(
    facts: &CaseFacts,
    roles: &[String],
    prior: &[Opinion],
    round: u32,
    pool: &BackendPool,
    routes: &AgentRoutes,
) -> Vec<Opinion> {
    let solo = roles.len() == 1 && roles[0] == SOLO_ROLE;
    let calls = roles.iter().map(|role| async move {
        let (system, user) = specialist_prompt(facts, role, prior, solo);
        let request = ChatRequest::new(
            routes.specialist_backend(role),
            vec![ChatMessage::system(system), ChatMessage::user(user)],
        );
        match pool.call(&request).await {
            Ok(delivered) => parse_opinion(&delivered.response.content, role, round)
                .unwrap_or_else(|| Opinion::no_opinion(role, round)),
            Err(err) => {
                tracing::warn!(role = role.as_str(), "specialist call failed: {err}");
                Opinion::no_opinion(role, round)
            }
        }
    });
    join_all(calls).await
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consensus {
    pub winner: String,
    pub support: usize,
    pub dissent: Vec<String>,
}

fn mean(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

/// Votes over normalized labels, ignoring no-opinion entries. A strict
/// majority wins; otherwise the highest mean confidence; otherwise the
/// lexicographically smallest label. Permutation-invariant.
pub fn aggregate_opinions(opinions: &[Opinion]) -> Result<Consensus, CouncilError> {
    let mut votes: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for op in opinions.iter().filter(|o| !o.is_no_opinion()) {
        votes.entry(normalize_label(&op.diagnosis)).or_default().push(op.confidence);
    }
    let voters: usize = votes.values().map(Vec::len).sum();
    if voters == 0 {
        return Err(CouncilError::AggregationEmpty);
    }
    let majority = votes.iter().find(|(_, v)| v.len() * 2 > voters);
    let winner = match majority {
        Some((label, _)) => label.clone(),
        None => {
            let mut best: Option<(&String, f64)> = None;
            for (label, confs) in &votes {
                let m = mean(confs);
                if best.map_or(true, |(_, bm)| m > bm) {
                    best = Some((label, m));
                }
            }
            best.expect("non-empty votes").0.clone()
        }
    };
    let support = votes[&winner].len();
    let dissent = votes.keys().filter(|l| **l != winner).cloned().collect();
    Ok(Consensus { winner, support, dissent })
}

/// Roles whose opinion matches the winning label, in opinion order.
pub fn contributing_roles(opinions: &[Opinion], winner: &str) -> Vec<String> {
    let mut roles: Vec<String> = Vec::new();
    for op in opinions {
        if normalize_label(&op.diagnosis) == winner && !roles.contains(&op.role) {
            roles.push(op.role.clone());
        }
    }
    roles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Synthesis {
    pub packet: AdvicePacket,
    pub fallback: bool,
}

fn parse_packet(raw: &str, roles: Vec<String>) -> Option<AdvicePacket> {
    let obj = first_json_object(raw)?;
    let diagnoses = obj
        .get("diagnoses")?
        .as_array()?
        .iter()
        .map(|d| match d {
            Value::String(label) => Some(Diagnosis { label: label.trim().to_string(), confidence: 0.5 }),
            Value::Object(o) => Some(Diagnosis {
                label: o.get("label")?.as_str()?.trim().to_string(),
                confidence: o.get("confidence").and_then(Value::as_f64).unwrap_or(0.5).clamp(0.0, 1.0),
            }),
            _ => None,
        })
        .collect::<Option<Vec<_>>>()?;
    let actions = string_list(obj.get("actions"));
    let referral = obj.get("referral").and_then(Value::as_bool).unwrap_or(false);
    let reason = referral.then(|| {
        obj.get("referral_reason")
            .and_then(Value::as_str)
            .map(str::trim)
            .filter(|r| !r.is_empty())
            .unwrap_or("referral recommended by the team")
            .to_string()
    });
    AdvicePacket::new(diagnoses, actions, reason, roles).ok()
}

fn mechanical_packet(consensus: &Consensus, opinions: &[Opinion], roles: Vec<String>) -> AdvicePacket {
    let confs: Vec<f64> = opinions
        .iter()
        .filter(|o| normalize_label(&o.diagnosis) == consensus.winner)
        .map(|o| o.confidence)
        .collect();
    let confidence = if confs.is_empty() { 0.0 } else { mean(&confs) };
    let mut actions: Vec<String> = Vec::new();
    for step in opinions.iter().flat_map(|o| o.plan.iter()) {
        if !actions.contains(step) {
            actions.push(step.clone());
        }
    }
    AdvicePacket {
        diagnoses: vec![Diagnosis { label: consensus.winner.clone(), confidence }],
        actions,
        referral: false,
        referral_reason: None,
        contributing_roles: roles,
    }
}

/// Moderator merge of the team's opinions into one advice packet. Falls back
/// to a mechanical packet (winner only, union of plans) when the moderator
/// answer is unusable or the backend fails. `extra` is appended verbatim to
/// the moderator prompt.
pub async fn synthesize_advice(
    facts: &CaseFacts,
    consensus: &Consensus,
    opinions: &[Opinion],
    pool: &BackendPool,
    backend: &str,
    extra: Option<&str>,
) -> Synthesis {
    let roles = contributing_roles(opinions, &consensus.winner);
    let system = format!(
        "{MODERATOR_MARKER}\nYou chair the team advising a rural health worker. Merge the team's \
         opinions into one advice packet.\nAnswer with a JSON object: {{\"diagnoses\": [{{\"label\": string, \
         \"confidence\": number}}], \"actions\": [string], \"referral\": boolean, \"referral_reason\": string or null}}"
    );
    let mut user = format!(
        "Case facts:\n{}\nTeam consensus: {} (supported by {} of {})\n",
        facts.render(),
        consensus.winner,
        consensus.support,
        opinions.iter().filter(|o| !o.is_no_opinion()).count()
    );
    if !consensus.dissent.is_empty() {
        user.push_str(&format!("Dissenting diagnoses: {}\n", consensus.dissent.join(", ")));
    }
    user.push_str("Opinions:\n");
    for op in opinions.iter().filter(|o| !o.is_no_opinion()) {
        user.push_str(&format!("- {}: {}; plan: {}\n", op.role, op.diagnosis, op.plan.join("; ")));
    }
    if let Some(extra) = extra {
        user.push('\n');
        user.push_str(extra);
    }
    let request = ChatRequest::new(backend, vec![ChatMessage::system(system), ChatMessage::user(user)]);
    let parsed = match pool.call(&request).await {
        Ok(delivered) => parse_packet(&delivered.response.content, roles.clone()),
        Err(err) => {
            tracing::warn!("moderator call failed: {err}");
            None
        }
    };
    match parsed {
        Some(packet) => Synthesis { packet, fallback: false },
        None => Synthesis { packet: mechanical_packet(consensus, opinions, roles), fallback: true },
    }
}

/// Full deliberation record for the audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Deliberation {
    pub plan: TeamPlan,
    pub rounds: Vec<Vec<Opinion>>,
}

impl Deliberation {
    pub fn final_opinions(&self) -> &[Opinion] {
        self.rounds.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Runs every round of `plan` sequentially.
pub async fn deliberate(
    plan: TeamPlan,
    facts: &CaseFacts,
    pool: &BackendPool,
    routes: &AgentRoutes,
) -> Deliberation {
    let mut rounds: Vec<Vec<Opinion>> = Vec::new();
    for round in 1..=plan.rounds {
        let prior = rounds.last().map(Vec::as_slice).unwrap_or(&[]);
        let opinions = run_round(facts, &plan.roles, prior, round, pool, routes).await;
        rounds.push(opinions);
    }
    Deliberation { plan, rounds }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::{any, prop, prop_assert_eq, prop_oneof, proptest, Just};
    use proptest::strategy::Strategy as PropStrategy;

    use super::*;
    use crate::backend::{Matcher, RetryPolicy, ScriptFault, ScriptedBackend};
    use crate::clock::ManualClock;

    fn facts(complaint: &str) -> CaseFacts {
        CaseFacts {
            age: Some(40),
            sex: None,
            complaint: complaint.into(),
            history: vec![],
            vitals: Default::default(),
            earlier_turns: vec![],
        }
    }

    fn op(diagnosis: &str, confidence: f64) -> Opinion {
        Opinion { role: format!("r-{diagnosis}-{confidence}"), diagnosis: diagnosis.into(), confidence, plan: vec![], round: 1 }
    }

    fn triage(level: ComplexityLevel) -> TriageResult {
        TriageResult { level, rationale: String::new(), red_flags: vec![], confidence: 0.8 }
    }

    fn pool(script: Arc<ScriptedBackend>) -> BackendPool {
        let mut pool = BackendPool::new(Arc::new(ManualClock::default()));
        pool.insert("m", script, RetryPolicy::new(0));
        pool
    }

    fn small_roster() -> Roster {
        let mut roles = IndexMap::new();
        roles.insert("cardiology".to_string(), vec!["chest".to_string()]);
        roles.insert("pulmonology".to_string(), vec!["cough".to_string()]);
        roles.insert("infectious_disease".to_string(), vec!["fever".to_string(), "chills".to_string()]);
        Roster::new(roles).unwrap()
    }

    #[tokio::test]
    async fn low_is_solo_primary_care() {
        let plan = plan_team(&triage(ComplexityLevel::Low), &facts("x"), &CouncilConfig::default(), &Roster::default(), None)
            .await
            .unwrap();
        assert_eq!(plan, TeamPlan { strategy: Strategy::Solo, roles: vec!["primary_care".into()], rounds: 1 });
    }

    #[tokio::test]
    async fn medium_defaults_to_six_roles_two_rounds() {
        let plan = plan_team(&triage(ComplexityLevel::Medium), &facts("cough"), &CouncilConfig::default(), &Roster::default(), None)
            .await
            .unwrap();
        assert_eq!(plan.strategy, Strategy::Mdt);
        assert_eq!(plan.roles.len(), 6);
        assert_eq!(plan.rounds, 2);
        let mut distinct = plan.roles.clone();
        distinct.dedup();
        assert_eq!(distinct.len(), 6);
    }

    #[tokio::test]
    async fn high_is_rejected() {
        let err = plan_team(&triage(ComplexityLevel::High), &facts("x"), &CouncilConfig::default(), &Roster::default(), None)
            .await
            .unwrap_err();
        assert_eq!(err, CouncilError::HighComplexityRejected);
    }

    #[test]
    fn keyword_scoring_examples() {
        // Scores for "cough and fever": cardiology 0, pulmonology 1,
        // infectious_disease 1. Tie between the last two broken by roster
        // order, so pulmonology comes first.
        let roles = select_by_keywords("cough and fever", 2, &small_roster()).unwrap();
        assert_eq!(roles, vec!["pulmonology", "infectious_disease"]);
        // "fever with chills" scores infectious_disease 2.
        let roles = select_by_keywords("Fever with chills", 1, &small_roster()).unwrap();
        assert_eq!(roles, vec!["infectious_disease"]);
        let roles = select_by_keywords("nothing relevant", 2, &small_roster()).unwrap();
        assert_eq!(roles, vec!["cardiology", "pulmonology"]);
        assert_eq!(
            select_by_keywords("x", 10, &Roster::default()),
            Err(CouncilError::TeamExceedsRoster { k: 10, roster: 8 })
        );
    }

    #[tokio::test]
    async fn model_selection_and_fallback() {
        let script = Arc::new(ScriptedBackend::new("m"));
        script.on(SELECTOR_MARKER, &[r#"{"roles":["infectious_disease","cardiology"]}"#, "whatever"]).unwrap();
        let p = pool(script);
        let roles = select_specialists("cough", 2, &small_roster(), Some((&p, "m"))).await.unwrap();
        assert_eq!(roles, vec!["infectious_disease", "cardiology"]);
        let roles = select_specialists("cough", 2, &small_roster(), Some((&p, "m"))).await.unwrap();
        assert_eq!(roles, vec!["pulmonology", "cardiology"]);
    }

    #[tokio::test]
    async fn round_keeps_role_order_and_shares_prior_opinions() {
        let script = Arc::new(ScriptedBackend::new("m"));
        script
            .register_script(
                Matcher::pattern(r"(?s)Role: pulmonology.*round 1").unwrap(),
                vec![r#"{"diagnosis":"Bronchitis","confidence":0.7,"plan":["steam inhalation"]}"#.into()],
                true,
            )
            .unwrap();
        script.always("Role: cardiology", r#"{"diagnosis":"Angina","confidence":0.4}"#).unwrap();
        script.always("Role: pulmonology", r#"{"diagnosis":"Pneumonia","confidence":0.6,"plan":["antibiotics"]}"#).unwrap();
        script.always("Role: infectious_disease", "not json").unwrap();
        let p = pool(script.clone());
        let routes = AgentRoutes::new("m");
        let roles: Vec<String> = ["cardiology", "pulmonology", "infectious_disease"].map(String::from).to_vec();
        let r1 = run_round(&facts("cough"), &roles, &[], 1, &p, &routes).await;
        assert_eq!(r1.iter().map(|o| o.role.as_str()).collect::<Vec<_>>(), ["cardiology", "pulmonology", "infectious_disease"]);
        assert_eq!(r1[1].diagnosis, "Pneumonia");
        assert!(r1[2].is_no_opinion());
        let r2 = run_round(&facts("cough"), &roles, &r1, 2, &p, &routes).await;
        assert_eq!(r2[1].diagnosis, "Bronchitis");
        let cardiology_round2 = script
            .calls()
            .into_iter()
            .filter(|c| c.transcript().contains("Role: cardiology"))
            .nth(1)
            .unwrap();
        assert!(cardiology_round2.transcript().contains("pulmonology (round 1): Pneumonia"));
    }

    #[tokio::test]
    async fn one_timeout_only_affects_that_role() {
        let script = Arc::new(ScriptedBackend::new("m"));
        script
            .register_script(Matcher::substring("Role: cardiology"), vec![ScriptFault::Timeout.into()], true)
            .unwrap();
        script.always(SPECIALIST_MARKER, r#"{"diagnosis":"flu","confidence":0.8}"#).unwrap();
        let p = pool(script);
        let roles: Vec<String> = ["pulmonology", "cardiology", "pediatrics"].map(String::from).to_vec();
        let ops = run_round(&facts("cough"), &roles, &[], 1, &p, &AgentRoutes::new("m")).await;
        assert_eq!(ops.len(), 3);
        assert!(ops[1].is_no_opinion());
        assert_eq!(ops[1].confidence, 0.0);
        assert!(!ops[0].is_no_opinion() && !ops[2].is_no_opinion());
    }

    #[test]
    fn aggregation_examples() {
        let c = aggregate_opinions(&[op("Flu", 0.5), op("flu", 0.5), op("dengue", 0.9)]).unwrap();
        assert_eq!(c, Consensus { winner: "flu".into(), support: 2, dissent: vec!["dengue".into()] });
        assert_eq!(aggregate_opinions(&[op("a", 0.9), op("b", 0.4)]).unwrap().winner, "a");
        assert_eq!(aggregate_opinions(&[op("b", 0.5), op("a", 0.5)]).unwrap().winner, "a");
        assert_eq!(
            aggregate_opinions(&[Opinion::no_opinion("x", 1)]),
            Err(CouncilError::AggregationEmpty)
        );
        let c = aggregate_opinions(&[op("  Viral  Fever", 0.3), Opinion::no_opinion("y", 1)]).unwrap();
        assert_eq!((c.winner.as_str(), c.support), ("viral fever", 1));
    }

    fn opinion_strategy() -> impl PropStrategy<Value = Opinion> {
        (prop_oneof![Just("flu"), Just("Flu "), Just("dengue"), Just("malaria"), Just("no-opinion")], 0u32..=10)
            .prop_map(|(d, c)| op(d, c as f64 / 10.0))
    }

    proptest! {
        #[test]
        fn aggregation_is_permutation_invariant(
            ops in prop::collection::vec(opinion_strategy(), 1..8),
            seed in any::<u64>(),
        ) {
            let mut shuffled = ops.clone();
            // Deterministic Fisher-Yates from the seed.
            let mut state = seed | 1;
            for i in (1..shuffled.len()).rev() {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                shuffled.swap(i, (state % (i as u64 + 1)) as usize);
            }
            prop_assert_eq!(aggregate_opinions(&ops), aggregate_opinions(&shuffled));
        }
    }

    #[tokio::test]
    async fn synthesis_parses_or_falls_back() {
        let opinions = vec![
            Opinion { role: "gp".into(), diagnosis: "flu".into(), confidence: 0.8, plan: vec!["rest".into()], round: 1 },
            Opinion { role: "pulmo".into(), diagnosis: "Flu".into(), confidence: 0.6, plan: vec!["fluids".into(), "rest".into()], round: 1 },
            Opinion { role: "cardio".into(), diagnosis: "angina".into(), confidence: 0.3, plan: vec!["ecg".into()], round: 1 },
        ];
        let consensus = aggregate_opinions(&opinions).unwrap();
        let script = Arc::new(ScriptedBackend::new("m"));
        script
            .on(
                MODERATOR_MARKER,
                &[r#"{"diagnoses":[{"label":"influenza","confidence":0.7}],"actions":["rest","fluids"],"referral":false}"#, "garbage"],
            )
            .unwrap();
        let p = pool(script);
        let s = synthesize_advice(&facts("cough"), &consensus, &opinions, &p, "m", None).await;
        assert!(!s.fallback);
        assert_eq!(s.packet.diagnoses[0].label, "influenza");
        assert_eq!(s.packet.actions, vec!["rest", "fluids"]);
        assert_eq!(s.packet.contributing_roles, vec!["gp", "pulmo"]);

        let s = synthesize_advice(&facts("cough"), &consensus, &opinions, &p, "m", None).await;
        assert!(s.fallback);
        assert_eq!(s.packet.diagnoses[0].label, "flu");
        assert!((s.packet.diagnoses[0].confidence - 0.7).abs() < 1e-12);
        assert_eq!(s.packet.actions, vec!["rest", "fluids", "ecg"]);
        assert!(!s.packet.referral);
        assert_eq!(s.packet.contributing_roles, vec!["gp", "pulmo"]);
    }

    #[tokio::test]
    async fn deliberation_runs_rounds_in_sequence() {
        let script = Arc::new(ScriptedBackend::new("m"));
        script.always(SPECIALIST_MARKER, r#"{"diagnosis":"flu","confidence":0.8}"#).unwrap();
        let p = pool(script.clone());
        let plan = TeamPlan { strategy: Strategy::Mdt, roles: vec!["a".into(), "b".into()], rounds: 3 };
        let d = deliberate(plan, &facts("x"), &p, &AgentRoutes::new("m")).await;
        assert_eq!(d.rounds.len(), 3);
        assert_eq!(d.final_opinions()[0].round, 3);
        assert_eq!(script.call_count(), 6);
    }

    #[test]
    fn config_validation() {
        let ok = CouncilConfig::default();
        assert!(ok.validate(&Roster::default()).is_ok());
        let small = CouncilConfig { team_size: 1, ..ok.clone() };
        assert!(matches!(small.validate(&Roster::default()), Err(CouncilError::InvalidTeamSize { .. })));
        let big = CouncilConfig { team_size: 6, ..ok };
        assert!(matches!(big.validate(&small_roster()), Err(CouncilError::TeamExceedsRoster { .. })));
    }
}

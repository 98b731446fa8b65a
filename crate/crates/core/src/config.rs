//! Engine configuration file (TOML). Relative paths resolve against the
//! directory holding the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AgentRoutes, BackendConfig, BackendKind, BackendPool};
use crate::clock::Clock;
use crate::council::{CouncilConfig, Roster, SelectionMode, DEFAULT_MAX_TEAM, DEFAULT_ROUNDS, DEFAULT_TEAM_SIZE};
use crate::domain::LanguageTag;
use crate::refine::{GuardrailRuleset, SimplifyConfig, DEFAULT_MAX_GRADE};
use crate::translation::{DictionaryTranslator, Glossary, TranslationEngine};
use crate::triage::{default_red_flags, load_red_flags, RedFlagRule, DEFAULT_ATTEMPTS};

pub const DEFAULT_PORT: u16 = 8080;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const DEFAULT_SAFE_RESPONSE: &str = "We cannot give advice for this message. Please take the patient to the \
     nearest health center for a check-up by a trained health provider.";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("config syntax: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamSection {
    #[serde(default = "default_team_size")]
    pub size: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_max_team")]
    pub max_team: usize,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default)]
    pub roster: Option<PathBuf>,
}

fn default_team_size() -> usize {
    DEFAULT_TEAM_SIZE
}
fn default_rounds() -> u32 {
    DEFAULT_ROUNDS
}
fn default_max_team() -> usize {
    DEFAULT_MAX_TEAM
}

impl Default for TeamSection {
    fn default() -> Self {
        Self {
            size: DEFAULT_TEAM_SIZE,
            rounds: DEFAULT_ROUNDS,
            max_team: DEFAULT_MAX_TEAM,
            selection: SelectionMode::Keyword,
            roster: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriageSection {
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default)]
    pub red_flags: Option<PathBuf>,
}

fn default_attempts() -> u32 {
    DEFAULT_ATTEMPTS
}

impl Default for TriageSection {
    fn default() -> Self {
        Self { attempts: DEFAULT_ATTEMPTS, red_flags: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuardrailSection {
    pub ruleset: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationSection {
    #[serde(default = "default_mode")]
    pub mode: TranslationEngine,
    #[serde(default)]
    pub glossary: Option<PathBuf>,
    /// Language tag to TSV word list, for dictionary mode.
    #[serde(default)]
    pub dictionaries: BTreeMap<String, PathBuf>,
}

fn default_mode() -> TranslationEngine {
    TranslationEngine::Dictionary
}

impl Default for TranslationSection {
    fn default() -> Self {
        Self { mode: TranslationEngine::Dictionary, glossary: None, dictionaries: BTreeMap::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadabilitySection {
    #[serde(default = "default_grade")]
    pub max_grade: f64,
}

fn default_grade() -> f64 {
    DEFAULT_MAX_GRADE
}

impl Default for ReadabilitySection {
    fn default() -> Self {
        Self { max_grade: DEFAULT_MAX_GRADE }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StorageSection {
    pub dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    #[serde(default = "default_port")]
    pub port: u16,
    /// Environment variable holding the static bearer token. Unset means no
    /// authentication.
    #[serde(default)]
    pub api_token_env: Option<String>,
    #[serde(default)]
    pub cors_origins: Vec<String>,
}

fn default_port() -> u16 {
    DEFAULT_PORT
}

impl Default for ServerSection {
    fn default() -> Self {
        Self { port: DEFAULT_PORT, api_token_env: None, cors_origins: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResponsesSection {
    /// Language tag to safe-response text used whenever a guardrail blocks.
    #[serde(default)]
    pub safe_response: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { parallelism: DEFAULT_PARALLELISM }
    }
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub backends: Vec<BackendConfig>,
    pub agents: AgentRoutes,
    #[serde(default)]
    pub team: TeamSection,
    #[serde(default)]
    pub triage: TriageSection,
    pub guardrails: GuardrailSection,
    #[serde(default)]
    pub translation: TranslationSection,
    #[serde(default)]
    pub readability: ReadabilitySection,
    pub storage: StorageSection,
    #[serde(default)]
    pub server: ServerSection,
    #[serde(default)]
    pub responses: ResponsesSection,
    #[serde(default)]
    pub bench: BenchSection,
}

/// Fully loaded and cross-checked configuration.
#[derive(Debug, Clone)]
pub struct Settings {
    pub backends: Vec<BackendConfig>,
    pub routes: AgentRoutes,
    pub council: CouncilConfig,
    pub roster: Roster,
    pub triage_attempts: u32,
    pub red_flags: Vec<RedFlagRule>,
    pub ruleset: GuardrailRuleset,
    pub translation_mode: TranslationEngine,
    pub glossary: Glossary,
    pub dictionary: DictionaryTranslator,
    pub simplify: SimplifyConfig,
    pub storage_dir: PathBuf,
    pub server: ServerSection,
    pub safe_responses: BTreeMap<String, String>,
    pub bench_parallelism: usize,
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl Settings {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&raw, base)
    }

    pub fn from_toml(raw: &str, base: &Path) -> Result<Self, ConfigError> {
        let file: ConfigFile = toml::from_str(raw).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_file(file, base)
    }

    pub fn from_file(file: ConfigFile, base: &Path) -> Result<Self, ConfigError> {
        let mut backends = file.backends;
        for backend in &mut backends {
            if let Some(script) = &backend.script_file {
                backend.script_file = Some(resolve(base, script));
            }
            backend.validate().map_err(|e| invalid(e.to_string()))?;
        }
        for (i, b) in backends.iter().enumerate() {
            if backends[..i].iter().any(|o| o.name == b.name) {
                return Err(invalid(format!("backend `{}` is defined twice", b.name)));
            }
        }

        let ruleset = GuardrailRuleset::load(&resolve(base, &file.guardrails.ruleset))
            .map_err(|e| invalid(e.to_string()))?;
        if let Some(moderation) = ruleset.moderation_endpoint() {
            moderation.validate().map_err(|e| invalid(e.to_string()))?;
            if backends.iter().any(|b| b.name == moderation.name) {
                return Err(invalid(format!(
                    "moderation endpoint `{}` clashes with a backend of the same name",
                    moderation.name
                )));
            }
        }

        for name in file.agents.referenced() {
            if !backends.iter().any(|b| b.name == name) {
                return Err(invalid(format!("agents refer to undefined backend `{name}`")));
            }
        }

        let roster = match &file.team.roster {
            Some(p) => Roster::load(&resolve(base, p)).map_err(|e| invalid(e.to_string()))?,
            None => Roster::default(),
        };
        let council = CouncilConfig {
            team_size: file.team.size,
            rounds: file.team.rounds,
            max_team: file.team.max_team,
            selection: file.team.selection,
        };
        council.validate(&roster).map_err(|e| invalid(format!("team: {e}")))?;

        if file.triage.attempts == 0 {
            return Err(invalid("triage.attempts must be at least 1"));
        }
        let red_flags = match &file.triage.red_flags {
            Some(p) => load_red_flags(&resolve(base, p)).map_err(|e| invalid(e.to_string()))?,
            None => default_red_flags(),
        };

        let glossary = match &file.translation.glossary {
            Some(p) => Glossary::load(&resolve(base, p)).map_err(|e| invalid(e.to_string()))?,
            None => Glossary::default(),
        };
        let mut dictionary = DictionaryTranslator::new();
        for (tag, p) in &file.translation.dictionaries {
            let lang = LanguageTag::parse(tag).map_err(|e| invalid(format!("dictionary language: {e}")))?;
            dictionary.load_tsv(&lang, &resolve(base, p)).map_err(|e| invalid(e.to_string()))?;
        }

        if !(file.readability.max_grade.is_finite()) {
            return Err(invalid("readability.max_grade must be finite"));
        }
        if file.bench.parallelism == 0 {
            return Err(invalid("bench.parallelism must be at least 1"));
        }

        let mut safe_responses = file.responses.safe_response;
        safe_responses
            .entry(LanguageTag::PIVOT.to_string())
            .or_insert_with(|| DEFAULT_SAFE_RESPONSE.to_string());
        if safe_responses.values().any(|t| t.trim().is_empty()) {
            return Err(invalid("safe responses must not be empty"));
        }

        Ok(Self {
            backends,
            routes: file.agents,
            council,
            roster,
            triage_attempts: file.triage.attempts,
            red_flags,
            ruleset,
            translation_mode: file.translation.mode,
            glossary,
            dictionary,
            simplify: SimplifyConfig { max_grade: file.readability.max_grade },
            storage_dir: resolve(base, &file.storage.dir),
            server: file.server,
            safe_responses,
            bench_parallelism: file.bench.parallelism,
        })
    }

    /// Builds the backend pool, including the moderation endpoint if any.
    pub fn build_pool(&self, clock: Arc<dyn Clock>) -> Result<BackendPool, ConfigError> {
        let mut configs = self.backends.clone();
        configs.extend(self.ruleset.moderation_endpoint().cloned());
        BackendPool::from_configs(&configs, clock).map_err(|e| invalid(e.to_string()))
    }

    /// True when at least one backend talks to a live endpoint.
    pub fn uses_http(&self) -> bool {
        self.backends.iter().any(|b| b.kind == BackendKind::Http)
    }

    /// The safe response in `language`, falling back to the pivot text.
    pub fn safe_response(&self, language: &LanguageTag) -> &str {
        self.safe_responses
            .get(language.as_str())
            .or_else(|| self.safe_responses.get(language.primary()))
            .or_else(|| self.safe_responses.get(LanguageTag::PIVOT))
            .map(String::as_str)
            .unwrap_or(DEFAULT_SAFE_RESPONSE)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) {
        std::fs::write(dir.join(name), body).unwrap();
    }

    fn fixture_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "rules.json", r#"{"mandatory_disclaimer": "Not a diagnosis."}"#);
        dir
    }

    const MINIMAL: &str = r#"
        [[backends]]
        name = "s"
        kind = "scripted"

        [agents]
        default = "s"

        [guardrails]
        ruleset = "rules.json"

        [storage]
        dir = "store"
    "#;

    #[test]
    fn minimal_config_gets_defaults() {
        let dir = fixture_dir();
        let s = Settings::from_toml(MINIMAL, dir.path()).unwrap();
        assert_eq!(s.council.team_size, 6);
        assert_eq!(s.council.rounds, 2);
        assert_eq!(s.triage_attempts, 3);
        assert_eq!(s.storage_dir, dir.path().join("store"));
        assert_eq!(s.roster.len(), 8);
        assert_eq!(s.safe_response(&LanguageTag::parse("sw").unwrap()), DEFAULT_SAFE_RESPONSE);
        assert!(!s.uses_http());
    }

    #[test]
    fn undefined_backend_reference_fails() {
        let dir = fixture_dir();
        let raw = MINIMAL.replace("default = \"s\"", "default = \"s\"\ntriage = \"ghost\"");
        let err = Settings::from_toml(&raw, dir.path()).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn team_larger_than_roster_fails() {
        let dir = fixture_dir();
        let raw = format!("{MINIMAL}\n[team]\nsize = 9\nmax_team = 12\n");
        assert!(Settings::from_toml(&raw, dir.path()).unwrap_err().to_string().contains("team"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = fixture_dir();
        let raw = format!("{MINIMAL}\n[team]\nsizee = 4\n");
        assert!(matches!(Settings::from_toml(&raw, dir.path()), Err(ConfigError::Parse(_))));
    }
}

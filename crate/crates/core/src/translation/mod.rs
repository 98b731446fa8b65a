//! Local language ↔ pivot translation with a protected vernacular glossary.
//!
//! Glossary terms are masked with placeholders before the text reaches the
//! translator and restored afterwards, so vernacular phrases with no direct
//! pivot equivalent are carried as their clinical descriptors instead of
//! being guessed at by the model.

mod dictionary;
mod glossary;

use std::collections::HashSet;
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendPool, ChatMessage, ChatRequest, RetryError};
use crate::domain::LanguageTag;
use crate::text::{split_punct, token_spans};

pub use dictionary::{DictionaryError, DictionaryTranslator};
pub use glossary::{
    apply_glossary, mask_descriptors, placeholder, Glossary, GlossaryEntry, GlossaryError,
    GlossaryHit, MaskedText,
};

/// First line of every translation prompt; script matchers key on it.
pub const TASK_MARKER: &str = "Task: translate";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslationEngine {
    Dictionary,
    Backend,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationJob {
    pub text: String,
    pub source: LanguageTag,
    pub target: LanguageTag,
}

impl TranslationJob {
    pub fn new(text: impl Into<String>, source: LanguageTag, target: LanguageTag) -> Self {
        Self { text: text.into(), source, target }
    }

    pub fn validate(&self) -> Result<(), TranslationError> {
        if self.text.trim().is_empty() {
            return Err(TranslationError::InvalidJob("text is empty".into()));
        }
        if self.source.primary() == self.target.primary() {
            return Err(TranslationError::InvalidJob("source and target are the same".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationResult {
    pub text: String,
    pub glossary_hits: Vec<GlossaryHit>,
    pub engine: TranslationEngine,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslatorFailure {
    #[error("placeholder {0} was lost in translation")]
    PlaceholderLost(String),
    #[error("placeholder {0} was duplicated in translation")]
    PlaceholderDuplicated(String),
    #[error("translation backend failed: {0}")]
    Backend(RetryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TranslationError {
    #[error("invalid translation job: {0}")]
    InvalidJob(String),
    #[error("no translator for {from} -> {to}")]
    UnsupportedLanguagePair { from: LanguageTag, to: LanguageTag },
    #[error(transparent)]
    TranslatorFailure(#[from] TranslatorFailure),
}

#[async_trait]
pub trait Translator: Send + Sync {
    fn engine(&self) -> TranslationEngine;

    async fn translate_text(
        &self,
        text: &str,
        from: &LanguageTag,
        to: &LanguageTag,
    ) -> Result<String, TranslationError>;
}

/// Translates through a chat backend.
pub struct BackendTranslator {
    pool: Arc<BackendPool>,
    backend_name: String,
}

impl BackendTranslator {
    pub fn new(pool: Arc<BackendPool>, backend_name: impl Into<String>) -> Self {
        Self { pool, backend_name: backend_name.into() }
    }
}

#[async_trait]
impl Translator for BackendTranslator {
    fn engine(&self) -> TranslationEngine {
        TranslationEngine::Backend
    }

    async fn translate_text(
        &self,
        text: &str,
        from: &LanguageTag,
        to: &LanguageTag,
    ) -> Result<String, TranslationError> {
        let system = format!(
            "{TASK_MARKER}\nTranslate the user's text from `{from}` to `{to}`. \
             Keep every token of the form ⟦G1⟧, ⟦G2⟧ ... and ⟦PHONE⟧ exactly as written, once each. \
             Reply with the translation only."
        );
        let request = ChatRequest::new(
            self.backend_name.clone(),
            vec![ChatMessage::system(system), ChatMessage::user(text)],
        );
        let delivered = self
            .pool
            .call(&request)
            .await
            .map_err(TranslatorFailure::Backend)?;
        Ok(delivered.response.content.trim().to_string())
    }
}

/// Passes text through unchanged. Used when workers already write in the
/// pivot language or for offline demos.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

#[async_trait]
impl Translator for IdentityTranslator {
    fn engine(&self) -> TranslationEngine {
        TranslationEngine::Identity
    }

    async fn translate_text(
        &self,
        text: &str,
        _from: &LanguageTag,
        _to: &LanguageTag,
    ) -> Result<String, TranslationError> {
        Ok(text.to_string())
    }
}

fn check_placeholders(masked: &MaskedText, output: &str) -> Result<(), TranslatorFailure> {
    for hit in &masked.hits {
        let before = masked.text.matches(hit.placeholder.as_str()).count();
        let after = output.matches(hit.placeholder.as_str()).count();
        if after < before {
            return Err(TranslatorFailure::PlaceholderLost(hit.placeholder.clone()));
        }
        if after > before {
            return Err(TranslatorFailure::PlaceholderDuplicated(hit.placeholder.clone()));
        }
    }
    Ok(())
}

/// Runs one translation job: mask glossary terms, translate, verify every
/// placeholder survived exactly once, then substitute. Toward the pivot a
/// placeholder becomes the entry's pivot descriptor; toward a local
/// language it becomes the vernacular term.
pub async fn translate(
    job: &TranslationJob,
    glossary: &Glossary,
    translator: &dyn Translator,
) -> Result<TranslationResult, TranslationError> {
    job.validate()?;
    let masked = if job.source.is_pivot() {
        mask_descriptors(&job.text, &job.target, glossary)
    } else {
        apply_glossary(&job.text, &job.source, glossary)
    };
    let raw = translator
        .translate_text(&masked.text, &job.source, &job.target)
        .await?;
    check_placeholders(&masked, &raw)?;
    let mut text = raw;
    for hit in &masked.hits {
        let replacement = if job.target.is_pivot() { &hit.pivot_descriptor } else { &hit.term };
        text = text.replace(hit.placeholder.as_str(), replacement);
    }
    Ok(TranslationResult {
        text,
        glossary_hits: masked.hits,
        engine: translator.engine(),
    })
}

fn token_set(text: &str) -> HashSet<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| split_punct(&text[s..e]).1.to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Token-set Jaccard similarity of two texts. Two empty texts are identical.
pub fn jaccard(a: &str, b: &str) -> f64 {
    let (a, b) = (token_set(a), token_set(b));
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Translates `text` to the pivot and back, scoring how much survived.
pub async fn round_trip_fidelity(
    text: &str,
    language: &LanguageTag,
    glossary: &Glossary,
    translator: &dyn Translator,
) -> Result<f64, TranslationError> {
    if language.is_pivot() {
        return Ok(1.0);
    }
    let there = translate(
        &TranslationJob::new(text, language.clone(), LanguageTag::pivot()),
        glossary,
        translator,
    )
    .await?;
    let back = translate(
        &TranslationJob::new(there.text, LanguageTag::pivot(), language.clone()),
        glossary,
        translator,
    )
    .await?;
    Ok(jaccard(text, &back.text))
}

//! Token-wise dictionary translator backed by per-language TSV files.
//!
//! Each file maps `local_token<TAB>pivot_token` for one local language. The
//! mapping must be a bijection so that translating to the pivot and back is
//! the identity on covered vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use async_trait::async_trait;
use thiserror::Error;

use super::{TranslationEngine, TranslationError, Translator};
use crate::domain::LanguageTag;
use crate::text::{split_punct, token_spans};

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("cannot read dictionary {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("dictionary line {line}: {reason}")]
    BadLine { line: usize, reason: String },
    #[error("dictionary token `{token}` maps to more than one translation")]
    NotInvertible { token: String },
}

#[derive(Debug, Clone, Default)]
struct WordMap {
    to_pivot: HashMap<String, String>,
    from_pivot: HashMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct DictionaryTranslator {
    languages: BTreeMap<String, WordMap>,
}

impl DictionaryTranslator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the word map for `language` from TSV text. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn add_tsv(&mut self, language: &LanguageTag, tsv: &str) -> Result<(), DictionaryError> {
        let mut map = WordMap::default();
        for (idx, line) in tsv.lines().enumerate() {
            let line_no = idx + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split('\t');
            let (Some(local), Some(pivot), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(DictionaryError::BadLine {
                    line: line_no,
                    reason: "expected exactly two tab-separated columns".into(),
                });
            };
            let (local, pivot) = (local.trim().to_lowercase(), pivot.trim().to_lowercase());
            if local.is_empty() || pivot.is_empty() {
                return Err(DictionaryError::BadLine { line: line_no, reason: "empty column".into() });
            }
            if local.contains(char::is_whitespace) || pivot.contains(char::is_whitespace) {
                return Err(DictionaryError::BadLine {
                    line: line_no,
                    reason: "columns must be single tokens".into(),
                });
            }
            if let Some(prev) = map.to_pivot.insert(local.clone(), pivot.clone()) {
                if prev != pivot {
                    return Err(DictionaryError::NotInvertible { token: local });
                }
            }
            if let Some(prev) = map.from_pivot.insert(pivot.clone(), local.clone()) {
                if prev != local {
                    return Err(DictionaryError::NotInvertible { token: pivot });
                }
            }
        }
        self.languages.insert(language.primary().to_string(), map);
        Ok(())
    }

    pub fn load_tsv(&mut self, language: &LanguageTag, path: &Path) -> Result<(), DictionaryError> {
        let raw = std::fs::read_to_string(path).map_err(|source| DictionaryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.add_tsv(language, &raw)
    }

    pub fn supports(&self, language: &LanguageTag) -> bool {
        language.is_pivot() || self.languages.contains_key(language.primary())
    }

    fn table(
        &self,
        from: &LanguageTag,
        to: &LanguageTag,
    ) -> Result<&HashMap<String, String>, TranslationError> {
        let unsupported = || TranslationError::UnsupportedLanguagePair {
            from: from.clone(),
            to: to.clone(),
        };
        match (from.is_pivot(), to.is_pivot()) {
            (false, true) => self.languages.get(from.primary()).map(|m| &m.to_pivot).ok_or_else(unsupported),
            (true, false) => self.languages.get(to.primary()).map(|m| &m.from_pivot).ok_or_else(unsupported),
            _ => Err(unsupported()),
        }
    }
}

#[async_trait]
impl Translator for DictionaryTranslator {
    fn engine(&self) -> TranslationEngine {
        TranslationEngine::Dictionary
    }

    async fn translate_text(
        &self,
        text: &str,
        from: &LanguageTag,
        to: &LanguageTag,
    ) -> Result<String, TranslationError> {
        let table = self.table(from, to)?;
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        for (start, end) in token_spans(text) {
            out.push_str(&text[cursor..start]);
            let (lead, core, trail) = split_punct(&text[start..end]);
            out.push_str(lead);
            match table.get(&core.to_lowercase()) {
                Some(mapped) => out.push_str(mapped),
                None => out.push_str(core),
            }
            out.push_str(trail);
            cursor = end;
        }
        out.push_str(&text[cursor..]);
        Ok(out)
    }
}

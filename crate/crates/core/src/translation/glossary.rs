//! Protected vernacular glossary and placeholder masking.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::LanguageTag;
use crate::text::token_spans;

pub const PLACEHOLDER_OPEN: char = '⟦';
pub const PLACEHOLDER_CLOSE: char = '⟧';

pub fn placeholder(index: usize) -> String {
    format!("{PLACEHOLDER_OPEN}G{index}{PLACEHOLDER_CLOSE}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryEntry {
    pub term: String,
    pub language: LanguageTag,
    pub pivot_descriptor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Error)]
pub enum GlossaryError {
    #[error("cannot read glossary {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("glossary is not a JSON array of entries: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("glossary entry {index} has an empty term or descriptor")]
    EmptyField { index: usize },
    #[error("glossary term `{term}` ({language}) is listed twice")]
    Duplicate { term: String, language: LanguageTag },
    #[error("glossary entry {index} uses reserved placeholder glyphs")]
    ReservedGlyph { index: usize },
}

/// One masked occurrence, in order of appearance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlossaryHit {
    pub placeholder: String,
    pub term: String,
    pub pivot_descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedText {
    pub text: String,
    pub hits: Vec<GlossaryHit>,
}

#[derive(Debug, Clone, Default)]
pub struct Glossary {
    entries: Vec<GlossaryEntry>,
}

impl Glossary {
    pub fn new(entries: Vec<GlossaryEntry>) -> Result<Self, GlossaryError> {
        let mut seen = HashSet::new();
        for (index, entry) in entries.iter().enumerate() {
            if entry.term.trim().is_empty() || entry.pivot_descriptor.trim().is_empty() {
                return Err(GlossaryError::EmptyField { index });
            }
            let reserved = |s: &str| s.contains(PLACEHOLDER_OPEN) || s.contains(PLACEHOLDER_CLOSE);
            if reserved(&entry.term) || reserved(&entry.pivot_descriptor) {
                return Err(GlossaryError::ReservedGlyph { index });
            }
            let key = (fold(&entry.term), entry.language.primary().to_string());
            if !seen.insert(key) {
                return Err(GlossaryError::Duplicate {
                    term: entry.term.clone(),
                    language: entry.language.clone(),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, GlossaryError> {
        let raw = std::fs::read_to_string(path).map_err(|source| GlossaryError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(serde_json::from_str(&raw)?)
    }

    pub fn entries(&self) -> &[GlossaryEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries for `language`, compared on the primary subtag.
    pub fn for_language<'a>(&'a self, language: &'a LanguageTag) -> impl Iterator<Item = &'a GlossaryEntry> {
        self.entries
            .iter()
            .filter(move |e| e.language.primary() == language.primary())
    }
}

fn fold(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_edge_punct(s: &str) -> bool {
    s.chars().all(|c| c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '।' | '،' | '؟'))
}

struct Candidate<'a> {
    tokens: Vec<String>,
    entry: &'a GlossaryEntry,
}

/// Matches `candidate` at token `i`. Interior tokens must be equal after
/// case folding; the first token may carry extra leading punctuation and the
/// last extra trailing punctuation. Returns the byte span to replace.
fn match_at(
    text: &str,
    spans: &[(usize, usize)],
    i: usize,
    candidate: &Candidate<'_>,
) -> Option<(usize, usize)> {
    let n = candidate.tokens.len();
    if i + n > spans.len() {
        return None;
    }
    let mut start = spans[i].0;
    let mut end = spans[i + n - 1].1;
    for (k, want) in candidate.tokens.iter().enumerate() {
        let (s, e) = spans[i + k];
        let got = text[s..e].to_lowercase();
        let lead_ok = k == 0;
        let trail_ok = k == n - 1;
        let pos = if lead_ok { got.find(want.as_str()) } else { got.starts_with(want.as_str()).then_some(0) }?;
        let prefix = &got[..pos];
        let suffix = &got[pos + want.len()..];
        if !prefix.is_empty() && !(lead_ok && is_edge_punct(prefix)) {
            return None;
        }
        if !suffix.is_empty() && !(trail_ok && is_edge_punct(suffix)) {
            return None;
        }
        // Case folding may change byte lengths; map back by char counts.
        if k == 0 {
            start = s + byte_offset(&text[s..e], prefix.chars().count());
        }
        if k == n - 1 {
            let keep = text[s..e].chars().count() - suffix.chars().count();
            end = s + byte_offset(&text[s..e], keep);
        }
    }
    Some((start, end))
}

fn byte_offset(s: &str, chars: usize) -> usize {
    s.char_indices().nth(chars).map(|(i, _)| i).unwrap_or(s.len())
}

fn mask_with<'a>(
    text: &str,
    mut candidates: Vec<Candidate<'a>>,
    first_index: usize,
    keyed_on: impl Fn(&GlossaryEntry) -> &str,
) -> MaskedText {
    // Longest match first: more tokens, then more characters, then file order.
    candidates.sort_by(|a, b| {
        b.tokens
            .len()
            .cmp(&a.tokens.len())
            .then_with(|| keyed_on(b.entry).len().cmp(&keyed_on(a.entry).len()))
    });
    let spans = token_spans(text);
    let mut out = String::with_capacity(text.len());
    let mut hits = Vec::new();
    let mut cursor = 0;
    let mut i = 0;
    while i < spans.len() {
        let found = candidates
            .iter()
            .find_map(|c| match_at(text, &spans, i, c).map(|span| (span, c)));
        match found {
            Some(((start, end), candidate)) => {
                let ph = placeholder(first_index + hits.len());
                out.push_str(&text[cursor..start]);
                out.push_str(&ph);
                cursor = end;
                hits.push(GlossaryHit {
                    placeholder: ph,
                    term: candidate.entry.term.clone(),
                    pivot_descriptor: candidate.entry.pivot_descriptor.clone(),
                });
                i += candidate.tokens.len();
            }
            None => i += 1,
        }
    }
    out.push_str(&text[cursor..]);
    MaskedText { text: out, hits }
}

/// Replaces each longest-match occurrence of a glossary term for `language`
/// with a placeholder `⟦G1⟧`, `⟦G2⟧`, ... Matching is case-insensitive on
/// whitespace token boundaries.
pub fn apply_glossary(text: &str, language: &LanguageTag, glossary: &Glossary) -> MaskedText {
    let candidates = glossary
        .for_language(language)
        .map(|entry| Candidate {
            tokens: entry.term.split_whitespace().map(str::to_lowercase).collect(),
            entry,
        })
        .collect();
    mask_with(text, candidates, 1, |e| &e.term)
}

/// Reverse direction: masks pivot descriptors of `language`'s entries so the
/// outbound leg can restore the vernacular term.
pub fn mask_descriptors(text: &str, language: &LanguageTag, glossary: &Glossary) -> MaskedText {
    let candidates = glossary
        .for_language(language)
        .map(|entry| Candidate {
            tokens: entry
                .pivot_descriptor
                .split_whitespace()
                .map(str::to_lowercase)
                .collect(),
            entry,
        })
        .collect();
    mask_with(text, candidates, 1, |e| &e.pivot_descriptor)
}

//! Small text helpers shared by the agents.

use serde_json::{Map, Value};

/// Returns the first JSON object embedded in `raw`, tolerating prose and
/// code fences around it.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}

/// Returns the first JSON array embedded in `raw`.
pub fn first_json_array(raw: &str) -> Option<Vec<Value>> {
    for (start, _) in raw.match_indices('[') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Array(items))) = stream.next() {
            return Some(items);
        }
    }
    None
}

/// Case-folds, trims and collapses internal whitespace.
pub fn normalize_label(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Whitespace tokens with their byte spans.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Splits a token into leading punctuation, core and trailing punctuation.
/// Placeholder glyphs count as part of the core.
pub fn split_punct(token: &str) -> (&str, &str, &str) {
    let is_edge = |c: char| c.is_ascii_punctuation() || matches!(c, '“' | '”' | '‘' | '’' | '।' | '،' | '؟');
    let core_start = token
        .char_indices()
        .find(|(_, c)| !is_edge(*c))
        .map(|(i, _)| i)
        .unwrap_or(token.len());
    let core_end = token
        .char_indices()
        .rev()
        .find(|(_, c)| !is_edge(*c))
        .map(|(i, c)| i + c.len_utf8())
        .unwrap_or(core_start);
    if core_end <= core_start {
        return (token, "", "");
    }
    (&token[..core_start], &token[core_start..core_end], &token[core_end..])
}

/// Truncates to at most `max_chars` characters on a char boundary.
pub fn truncate_chars(text: &str, max_chars: usize) -> &str {
    match text.char_indices().nth(max_chars) {
        Some((idx, _)) => &text[..idx],
        None => text,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_object_inside_prose_and_fences() {
        let raw = "Sure thing:\n```json\n{\"a\": {\"b\": 1}}\n```\nthanks";
        let obj = first_json_object(raw).unwrap();
        assert_eq!(obj["a"]["b"], 1);
        assert!(first_json_object("no braces {here").is_none());
        let obj = first_json_object("{broken {\"ok\":true}").unwrap();
        assert_eq!(obj["ok"], true);
    }

    #[test]
    fn normalizes_labels() {
        assert_eq!(normalize_label("  Viral   FEVER \n"), "viral fever");
    }

    #[test]
    fn spans_and_punctuation() {
        let text = " vedi  cheyatam, now";
        let spans = token_spans(text);
        let tokens: Vec<_> = spans.iter().map(|(s, e)| &text[*s..*e]).collect();
        assert_eq!(tokens, ["vedi", "cheyatam,", "now"]);
        assert_eq!(split_punct("(cheyatam),"), ("(", "cheyatam", "),"));
        assert_eq!(split_punct("⟦G1⟧."), ("", "⟦G1⟧", "."));
        assert_eq!(split_punct("..."), ("...", "", ""));
    }
}

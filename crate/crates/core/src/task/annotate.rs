//! Fuzzy entity-name annotation.

use serde::{Deserialize, Serialize};

use super::db::{normalize, Database};

pub const OPEN: &str = "<name/>";
pub const CLOSE: &str = "</name>";

/// Largest normalized edit distance, relative to the longer string, that
/// still counts as a mention.
pub const MAX_EDIT_RATIO: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameSpan {
    /// Word range in the input utterance.
    pub start: usize,
    pub end: usize,
    pub domain: String,
    pub entity: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    /// Input words with each span wrapped in name tags.
    pub text: String,
    /// As `text`, but each span holds the lowercased database name.
    pub canonical: String,
    pub spans: Vec<NameSpan>,
}

pub fn edit_ratio(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

fn is_article(w: &str) -> bool {
    normalize(w).is_empty()
}

/// Wraps mentions of database entities. Every word span whose normalized
/// text is within [`MAX_EDIT_RATIO`] of a normalized entity name is a
/// candidate; candidates are accepted closest first (longer, then earlier
/// on ties) unless they overlap an accepted one. Spans never begin or end
/// with an article.
pub fn fuzzy_annotate(utterance: &str, db: &Database) -> Annotation {
    let words: Vec<&str> = utterance.split_whitespace().collect();
    let names: Vec<(String, &str, &str)> = db
        .names()
        .into_iter()
        .map(|(d, n)| (normalize(n), d, n))
        .collect();
    let max_words = names
        .iter()
        .map(|(n, _, _)| n.split(' ').count())
        .max()
        .unwrap_or(0)
        + 1;
    let mut candidates = Vec::new();
    for start in 0..words.len() {
        if is_article(words[start]) {
            continue;
        }
        for len in 1..=max_words.min(words.len() - start) {
            if is_article(words[start + len - 1]) {
                continue;
            }
            let norm = normalize(&words[start..start + len].join(" "));
            let best = names
                .iter()
                .map(|(n, d, e)| (edit_ratio(&norm, n), *d, *e))
                .filter(|(r, _, _)| *r <= MAX_EDIT_RATIO)
                .min_by(|a, b| a.0.total_cmp(&b.0));
            if let Some((r, d, e)) = best {
                candidates.push((r, start, len, d, e));
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.2.cmp(&a.2)).then(a.1.cmp(&b.1)));
    let mut spans: Vec<NameSpan> = Vec::new();
    for (_, start, len, domain, entity) in candidates {
        let end = start + len;
        if spans.iter().all(|s| end <= s.start || s.end <= start) {
            spans.push(NameSpan {
                start,
                end,
                domain: domain.to_string(),
                entity: entity.to_string(),
            });
        }
    }
    spans.sort_by_key(|s| s.start);
    let wrap = |canonical: bool| {
        let mut out = Vec::with_capacity(words.len() + 2 * spans.len());
        let mut next = spans.iter().peekable();
        let mut w = 0;
        while w < words.len() {
            match next.peek() {
                Some(s) if s.start == w => {
                    out.push(OPEN.to_string());
                    if canonical {
                        out.push(s.entity.to_lowercase());
                    } else {
                        out.extend(words[s.start..s.end].iter().map(|w| w.to_string()));
                    }
                    out.push(CLOSE.to_string());
                    w = s.end;
                    next.next();
                }
                _ => {
                    out.push(words[w].to_string());
                    w += 1;
                }
            }
        }
        out.join(" ")
    };
    Annotation {
        text: wrap(false),
        canonical: wrap(true),
        spans,
    }
}

/// Lowercases and splits sentence punctuation off words.
pub fn prepare_utterance(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 8);
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        let end_of_word = chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if matches!(c, '?' | '!' | ',') || (c == '.' && end_of_word) {
            out.push(' ');
            out.push(c);
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Text between the first pair of name tags, if any.
pub fn tagged_name(annotated: &str) -> Option<String> {
    let words: Vec<&str> = annotated.split_whitespace().collect();
    let open = words.iter().position(|w| *w == OPEN)?;
    let close = open + words[open..].iter().position(|w| *w == CLOSE)?;
    (close > open + 1).then(|| words[open + 1..close].join(" "))
}

//! Text normalization shared by title matching, surface-form lookup, and
//! vocabulary construction.

use std::collections::HashSet;
use std::sync::LazyLock;

use unicode_normalization::UnicodeNormalization;

static STOPWORDS: LazyLock<HashSet<String>> = LazyLock::new(|| {
    include_str!("../assets/stopwords.txt")
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(normalize)
        .collect()
});

/// Canonical form used for all string matching: Unicode NFC, lowercased,
/// underscores mapped to spaces, trimmed, internal whitespace collapsed to
/// a single space.
pub fn normalize(s: &str) -> String {
    let nfc: String = s.nfc().collect();
    let lowered = nfc.to_lowercase().replace('_', " ");
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Normalized whitespace-separated words of `s`; empty words are dropped.
pub fn normalized_words(s: &str) -> Vec<String> {
    normalize(s).split(' ').filter(|w| !w.is_empty()).map(str::to_owned).collect()
}

/// True if the normalized word is on the shipped stopword list.
pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&normalize(word))
}

/// Lowercased alphanumeric terms of `s`, splitting on everything else.
/// This is the term definition used by the retrieval baseline.
pub fn retrieval_terms(s: &str) -> Vec<String> {
    let norm: String = s.nfc().collect::<String>().to_lowercase();
    norm.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

/// True if the string contains at least one alphanumeric character, i.e.
/// it can act as a word occurrence rather than punctuation.
pub fn is_wordlike(s: &str) -> bool {
    s.chars().any(|c| c.is_alphanumeric())
}

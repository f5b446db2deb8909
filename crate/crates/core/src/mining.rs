//! Word-level supervision mining: finds attribute-indicative word
//! occurrences in unlabeled utterances and supervision documents.
//!
//! For each word occurrence the MLM head proposes its top-K contextual
//! replacements (the candidate set). Each attribute value gets a vocabulary
//! of the top-M words by frequency over the candidate sets of its own
//! surface-form occurrences, minus stopwords and words shared by too many
//! vocabularies. An occurrence whose candidate set overlaps a vocabulary
//! with `|C ∩ V| / |V| > beta` becomes a training word for that value,
//! keeping only the best value per occurrence.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{split_windows, BackendError, ContextEmbeddings, MlmBackend, TokenizedText, Window};
use crate::corpus::{AttributeSchema, AttributeValue, ConversationCorpus};
use crate::supervision::DocSupervision;
use crate::text;

#[derive(Debug, Error)]
pub enum MiningError {
    #[error("similarity against an empty attribute vocabulary")]
    EmptyVocabulary,
    #[error("value {0:?} has no occurrences and the template fallback produced nothing")]
    NoOccurrences(String),
    #[error("no attribute vocabulary could be built")]
    AllVocabulariesFailed,
    #[error("invalid mining parameter: {0}")]
    Params(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("word supervision: {0}")]
    Invalid(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MiningParams {
    /// Candidate-set size (top-K MLM replacements).
    pub k: usize,
    /// Attribute-vocabulary size cap (top-M by frequency).
    pub m: usize,
    /// Strict lower bound on the similarity of emitted supervision.
    pub beta: f64,
    /// Discard words present in more than this fraction of the provisional
    /// vocabularies.
    pub cross_vocab_threshold: f64,
    /// Replace the occurrence token with the mask token before applying the
    /// MLM head (off by default; requires a backend with a mask token).
    pub masked: bool,
}

impl Default for MiningParams {
    fn default() -> Self {
        Self { k: 50, m: 100, beta: 0.4, cross_vocab_threshold: 0.5, masked: false }
    }
}

impl MiningParams {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.k == 0 {
            return Err(MiningError::Params("k must be at least 1".into()));
        }
        if self.m == 0 {
            return Err(MiningError::Params("m must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(MiningError::Params(format!("beta must be in [0, 1), got {}", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.cross_vocab_threshold) {
            return Err(MiningError::Params(format!(
                "cross_vocab_threshold must be in [0, 1], got {}",
                self.cross_vocab_threshold
            )));
        }
        Ok(())
    }
}

/// One document fed into mining; also the unit the trainer re-reads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiningDoc {
    pub doc_id: String,
    pub text: String,
}

/// Deterministic mining corpus: one doc per utterance (when transductive)
/// followed by the supervision documents. The doc-id scheme
/// (`utt:<user>:<index>`, `doc:<id>`) is what `s_word.jsonl` refers to.
pub fn extraction_corpus(corpus: Option<&ConversationCorpus>, s_doc: Option<&DocSupervision>) -> Vec<MiningDoc> {
    let mut docs = Vec::new();
    if let Some(c) = corpus {
        for user in &c.users {
            for (i, utt) in user.utterances.iter().enumerate() {
                if !utt.trim().is_empty() {
                    docs.push(MiningDoc { doc_id: format!("utt:{}:{}", user.user_id, i), text: utt.clone() });
                }
            }
        }
    }
    if let Some(s) = s_doc {
        for entry in &s.entries {
            docs.push(MiningDoc { doc_id: format!("doc:{}", entry.doc_id), text: entry.text.clone() });
        }
    }
    docs
}

/// A document tokenized, windowed, and encoded once for repeated lookups.
pub struct AnalyzedDoc {
    pub doc_id: String,
    pub tokenized: TokenizedText,
    pub windows: Vec<Window>,
    embeddings: Vec<ContextEmbeddings>,
}

impl AnalyzedDoc {
    pub fn analyze(backend: &dyn MlmBackend, doc: &MiningDoc) -> Result<Self, MiningError> {
        let tokenized = backend.tokenize(&doc.text);
        let windows = split_windows(&tokenized, backend.max_content_len());
        let mut embeddings = Vec::with_capacity(windows.len());
        for w in &windows {
            embeddings.push(backend.encode(&w.tokens)?);
        }
        Ok(Self { doc_id: doc.doc_id.clone(), tokenized, windows, embeddings })
    }

    /// Contextual embedding of the head token of word `word_index`.
    /// With `masked`, the window is re-encoded with the head token replaced
    /// by the backend's mask token.
    pub fn head_embedding(
        &self,
        backend: &dyn MlmBackend,
        word_index: usize,
        masked: bool,
    ) -> Result<Vec<f64>, MiningError> {
        let span = &self.tokenized.word_spans[word_index];
        let head = span.head_token();
        let (window_pos, local) = self
            .windows
            .iter()
            .position(|w| head >= w.token_offset && head < w.token_offset + w.tokens.len())
            .map(|i| (i, head - self.windows[i].token_offset))
            .ok_or_else(|| MiningError::Invalid(format!("token {head} outside all windows")))?;
        if masked {
            let mask = backend
                .mask_token_id()
                .ok_or_else(|| MiningError::Params("backend has no mask token".into()))?;
            let mut tokens = self.windows[window_pos].tokens.clone();
            tokens.token_ids[local] = mask;
            let enc = backend.encode(&tokens)?;
            Ok(enc.token_vectors[local].clone())
        } else {
            Ok(self.embeddings[window_pos].token_vectors[local].clone())
        }
    }
}

/// Top-K contextual replacement words for one occurrence, ordered by
/// probability descending with ties broken by vocabulary id ascending.
/// Special and non-word vocabulary entries are excluded before truncation.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub words: Vec<(String, f64)>,
}

impl CandidateSet {
    pub fn word_set(&self) -> BTreeSet<String> {
        self.words.iter().map(|(w, _)| w.clone()).collect()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.iter().any(|(w, _)| w == word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Top-K words of the MLM distribution at one contextual embedding.
pub fn candidate_set(backend: &dyn MlmBackend, embedding: &[f64], k: usize) -> Result<CandidateSet, MiningError> {
    if k == 0 {
        return Err(MiningError::Params("k must be at least 1".into()));
    }
    let dist = backend.mlm_distribution(embedding)?;
    let mut entries: Vec<(u32, f64)> = dist
        .probs
        .iter()
        .enumerate()
        .filter_map(|(id, &p)| backend.vocab_word(id as u32).map(|_| (id as u32, p)))
        .collect();
    entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    entries.truncate(k);
    let words = entries
        .into_iter()
        .map(|(id, p)| (backend.vocab_word(id).expect("filtered to words").to_owned(), p))
        .collect();
    Ok(CandidateSet { words })
}

/// An attribute value's mined vocabulary: at most M words with their
/// candidate-set frequencies, sorted by frequency descending then word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    pub value: String,
    pub words: Vec<(String, usize)>,
}

impl AttributeVocabulary {
    pub fn word_set(&self) -> HashSet<&str> {
        self.words.iter().map(|(w, _)| w.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Counts word frequency over the occurrence candidate sets, removes
/// stopwords and cross-vocabulary discards, and keeps the top M by
/// frequency (ties broken lexicographically).
pub fn build_attribute_vocabulary(
    value: &str,
    occurrence_sets: &[BTreeSet<String>],
    m: usize,
    discard: &HashSet<String>,
) -> Result<AttributeVocabulary, MiningError> {
    if occurrence_sets.is_empty() {
        return Err(MiningError::NoOccurrences(value.to_owned()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for set in occurrence_sets {
        for word in set {
            *counts.entry(word.as_str()).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, _)| !text::is_stopword(w) && !discard.contains(*w))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    ranked.truncate(m);
    Ok(AttributeVocabulary { value: value.to_owned(), words: ranked.into_iter().map(|(w, c)| (w.to_owned(), c)).collect() })
}

/// `|C ∩ V| / |V|`: the fraction of the vocabulary present among the
/// occurrence's candidate words.
pub fn similarity(candidates: &CandidateSet, vocab: &AttributeVocabulary) -> Result<f64, MiningError> {
    if vocab.is_empty() {
        return Err(MiningError::EmptyVocabulary);
    }
    let cand = candidates.word_set();
    let overlap = vocab.words.iter().filter(|(w, _)| cand.contains(w)).count();
    Ok(overlap as f64 / vocab.len() as f64)
}

/// Word indices (one vector per occurrence) where the value's content-word
/// sequence appears contiguously, matched on normalized words. Matches do
/// not overlap.
pub fn find_occurrences(doc: &AnalyzedDoc, content_words: &[String]) -> Vec<Vec<usize>> {
    if content_words.is_empty() {
        return Vec::new();
    }
    let words: Vec<String> = doc.tokenized.word_spans.iter().map(|s| text::normalize(&s.word)).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i + content_words.len() <= words.len() {
        if words[i..i + content_words.len()].iter().zip(content_words).all(|(a, b)| a == b) {
            out.push((i..i + content_words.len()).collect());
            i += content_words.len();
        } else {
            i += 1;
        }
    }
    out
}

/// Everything the vocabulary build reports besides the vocabularies.
#[derive(Debug, Clone, Default)]
pub struct VocabularyBuild {
    pub vocabularies: Vec<AttributeVocabulary>,
    /// Values whose surface form never occurred; seeded from the template.
    pub fallback_values: Vec<String>,
    /// Values for which no vocabulary could be built at all.
    pub failed_values: Vec<String>,
    /// Words removed by the cross-vocabulary rule.
    pub discarded_words: Vec<String>,
}

const NEUTRAL_TEMPLATE_PREFIX: &str = "My";
const NEUTRAL_TEMPLATE_SUFFIX: &str = ".";

fn template_text(surface: &str) -> String {
    format!("{NEUTRAL_TEMPLATE_PREFIX} {surface} {NEUTRAL_TEMPLATE_SUFFIX}")
}

fn occurrence_sets_for_value(
    value: &AttributeValue,
    analyzed: &[AnalyzedDoc],
    backend: &dyn MlmBackend,
    params: &MiningParams,
) -> Result<Vec<BTreeSet<String>>, MiningError> {
    let content = value.content_words();
    let mut sets = Vec::new();
    for doc in analyzed {
        for occurrence in find_occurrences(doc, &content) {
            let mut union = BTreeSet::new();
            for wi in occurrence {
                let emb = doc.head_embedding(backend, wi, params.masked)?;
                union.extend(candidate_set(backend, &emb, params.k)?.word_set());
            }
            sets.push(union);
        }
    }
    Ok(sets)
}

/// Candidate sets for a value with no corpus occurrences: its surface form
/// inserted into a neutral template sentence.
fn fallback_sets(
    value: &AttributeValue,
    backend: &dyn MlmBackend,
    params: &MiningParams,
) -> Result<Vec<BTreeSet<String>>, MiningError> {
    let doc = MiningDoc { doc_id: format!("template:{}", value.normalized()), text: template_text(&value.surface) };
    let analyzed = AnalyzedDoc::analyze(backend, &doc)?;
    occurrence_sets_for_value(value, std::slice::from_ref(&analyzed), backend, params)
}

/// Forces the value's own content words into the front of a fallback
/// vocabulary, then keeps the template-derived words.
fn seed_fallback_vocabulary(vocab: AttributeVocabulary, content: &[String], m: usize) -> AttributeVocabulary {
    let top = vocab.words.first().map(|(_, c)| *c).unwrap_or(0);
    let mut words: Vec<(String, usize)> = content
        .iter()
        .filter(|w| !text::is_stopword(w))
        .map(|w| (w.clone(), top + 1))
        .collect();
    words.sort();
    words.dedup();
    for (w, c) in vocab.words {
        if !words.iter().any(|(have, _)| *have == w) {
            words.push((w, c));
        }
    }
    words.truncate(m);
    AttributeVocabulary { value: vocab.value, words }
}

/// Two-pass vocabulary construction for the whole schema: provisional
/// vocabularies, cross-vocabulary discards, then the final rebuild.
pub fn build_all_vocabularies(
    schema: &AttributeSchema,
    analyzed: &[AnalyzedDoc],
    backend: &dyn MlmBackend,
    params: &MiningParams,
) -> Result<VocabularyBuild, MiningError> {
    params.validate()?;
    // Occurrence candidate sets per value, with the template fallback.
    let mut per_value_sets: Vec<Option<Vec<BTreeSet<String>>>> = Vec::with_capacity(schema.len());
    let mut fallback_values = Vec::new();
    let mut failed_values = Vec::new();
    for value in schema.values() {
        let mut sets = occurrence_sets_for_value(value, analyzed, backend, params)?;
        if sets.is_empty() {
            log::warn!(
                "value {:?} has no surface-form occurrences; seeding its vocabulary from a template sentence",
                value.surface
            );
            fallback_values.push(value.surface.clone());
            sets = fallback_sets(value, backend, params)?;
            if sets.is_empty() {
                failed_values.push(value.surface.clone());
                per_value_sets.push(None);
                continue;
            }
        }
        per_value_sets.push(Some(sets));
    }

    let build_pass = |discard: &HashSet<String>| -> Result<Vec<Option<AttributeVocabulary>>, MiningError> {
        let mut out = Vec::with_capacity(schema.len());
        for (value, sets) in schema.values().iter().zip(&per_value_sets) {
            match sets {
                None => out.push(None),
                Some(sets) => {
                    let vocab = build_attribute_vocabulary(&value.surface, sets, params.m, discard)?;
                    let vocab = if fallback_values.contains(&value.surface) {
                        seed_fallback_vocabulary(vocab, &value.content_words(), params.m)
                    } else {
                        vocab
                    };
                    out.push(Some(vocab));
                }
            }
        }
        Ok(out)
    };

    let provisional = build_pass(&HashSet::new())?;
    let built: Vec<&AttributeVocabulary> = provisional.iter().flatten().collect();
    let mut discard = HashSet::new();
    if !built.is_empty() {
        let mut doc_freq: BTreeMap<&str, usize> = BTreeMap::new();
        for vocab in &built {
            for (w, _) in &vocab.words {
                *doc_freq.entry(w.as_str()).or_insert(0) += 1;
            }
        }
        let limit = params.cross_vocab_threshold * built.len() as f64;
        for (w, n) in doc_freq {
            if n as f64 > limit {
                discard.insert(w.to_owned());
            }
        }
    }
    let mut discarded_words: Vec<String> = discard.iter().cloned().collect();
    discarded_words.sort();

    let finals = build_pass(&discard)?;
    let mut vocabularies = Vec::new();
    for (value, vocab) in schema.values().iter().zip(finals) {
        match vocab {
            Some(v) if !v.is_empty() => vocabularies.push(v),
            _ => {
                if !failed_values.contains(&value.surface) {
                    log::warn!("vocabulary for {:?} is empty after filtering; value excluded from guessing", value.surface);
                    failed_values.push(value.surface.clone());
                }
            }
        }
    }
    if vocabularies.is_empty() {
        return Err(MiningError::AllVocabulariesFailed);
    }
    Ok(VocabularyBuild { vocabularies, fallback_values, failed_values, discarded_words })
}

/// One mined training word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSupervisionEntry {
    pub doc_id: String,
    /// Head-token index within the document's full tokenization.
    pub token_index: usize,
    pub word: String,
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct WordSupervision {
    pub entries: Vec<WordSupervisionEntry>,
}

impl WordSupervision {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Scores every word occurrence in every document against every attribute
/// vocabulary. Emits the argmax value when its similarity strictly exceeds
/// `beta`; occurrences whose best similarity is tied between values are
/// dropped.
pub fn extract_word_supervision(
    analyzed: &[AnalyzedDoc],
    vocabs: &[AttributeVocabulary],
    backend: &dyn MlmBackend,
    params: &MiningParams,
) -> Result<WordSupervision, MiningError> {
    params.validate()?;
    let mut entries = Vec::new();
    for doc in analyzed {
        for (wi, span) in doc.tokenized.word_spans.iter().enumerate() {
            if !text::is_wordlike(&span.word) {
                continue;
            }
            let emb = doc.head_embedding(backend, wi, params.masked)?;
            let cand = candidate_set(backend, &emb, params.k)?;
            let mut best: Option<(f64, usize)> = None;
            let mut tied = false;
            for (vi, vocab) in vocabs.iter().enumerate() {
                let sim = similarity(&cand, vocab)?;
                match best {
                    None => best = Some((sim, vi)),
                    Some((b, _)) if sim > b => {
                        best = Some((sim, vi));
                        tied = false;
                    }
                    Some((b, _)) if sim == b => tied = true,
                    _ => {}
                }
            }
            if let Some((sim, vi)) = best {
                if !tied && sim > params.beta {
                    entries.push(WordSupervisionEntry {
                        doc_id: doc.doc_id.clone(),
                        token_index: span.head_token(),
                        word: span.word.clone(),
                        label: vocabs[vi].value.clone(),
                        confidence: sim,
                    });
                }
            }
        }
    }
    Ok(WordSupervision { entries })
}

/// Analyzes the docs and runs the full guessing stage.
pub fn mine_word_supervision(
    schema: &AttributeSchema,
    docs: &[MiningDoc],
    backend: &dyn MlmBackend,
    params: &MiningParams,
) -> Result<(VocabularyBuild, WordSupervision), MiningError> {
    let analyzed: Vec<AnalyzedDoc> =
        docs.iter().map(|d| AnalyzedDoc::analyze(backend, d)).collect::<Result<_, _>>()?;
    let build = build_all_vocabularies(schema, &analyzed, backend, params)?;
    let word = extract_word_supervision(&analyzed, &build.vocabularies, backend, params)?;
    Ok((build, word))
}

// ---------------------------------------------------------------------------
// File formats

pub fn write_word_supervision(ws: &WordSupervision, path: &Path) -> Result<(), MiningError> {
    let io = |e| MiningError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for entry in &ws.entries {
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads `s_word.jsonl` back, revalidating the invariants: labels exist in
/// the schema, confidences lie in `(beta, 1]`, and `(doc_id, token_index)`
/// pairs are unique.
pub fn read_word_supervision(path: &Path, schema: &AttributeSchema, beta: f64) -> Result<WordSupervision, MiningError> {
    let io = |e| MiningError::Io { path: path.display().to_string(), source: e };
    let file = File::open(path).map_err(io)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: WordSupervisionEntry =
            serde_json::from_str(&line).map_err(|e| MiningError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: e.to_string(),
            })?;
        if schema.index_of(&entry.label).is_none() {
            return Err(MiningError::Invalid(format!("line {}: unknown label {:?}", idx + 1, entry.label)));
        }
        if !(entry.confidence > beta && entry.confidence <= 1.0) {
            return Err(MiningError::Invalid(format!(
                "line {}: confidence {} outside ({beta}, 1]",
                idx + 1,
                entry.confidence
            )));
        }
        if !seen.insert((entry.doc_id.clone(), entry.token_index)) {
            return Err(MiningError::Invalid(format!(
                "line {}: duplicate occurrence ({}, {})",
                idx + 1,
                entry.doc_id,
                entry.token_index
            )));
        }
        entries.push(entry);
    }
    Ok(WordSupervision { entries })
}

/// File-name-safe form of a value surface.
pub fn sanitize_value_name(value: &str) -> String {
    text::normalize(value)
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { '_' })
        .collect()
}

/// Writes one `vocab_<value>.json` inspection artifact per vocabulary.
pub fn write_vocabularies(vocabs: &[AttributeVocabulary], dir: &Path) -> Result<(), MiningError> {
    std::fs::create_dir_all(dir).map_err(|e| MiningError::Io { path: dir.display().to_string(), source: e })?;
    #[derive(Serialize)]
    struct VocabFile<'a> {
        value: &'a str,
        words: Vec<VocabWord<'a>>,
    }
    #[derive(Serialize)]
    struct VocabWord<'a> {
        word: &'a str,
        frequency: usize,
    }
    for vocab in vocabs {
        let path = dir.join(format!("vocab_{}.json", sanitize_value_name(&vocab.value)));
        let io = |e| MiningError::Io { path: path.display().to_string(), source: e };
        let file = File::create(&path).map_err(io)?;
        let body = VocabFile {
            value: &vocab.value,
            words: vocab.words.iter().map(|(w, c)| VocabWord { word: w, frequency: *c }).collect(),
        };
        serde_json::to_writer_pretty(BufWriter::new(file), &body)
            .map_err(|e| MiningError::Invalid(e.to_string()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::corpus::AttributeValue;

    fn set(words: &[&str]) -> BTreeSet<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    fn vocab(value: &str, words: &[&str]) -> AttributeVocabulary {
        AttributeVocabulary { value: value.into(), words: words.iter().map(|w| (w.to_string(), 1)).collect() }
    }

    #[test]
    fn candidate_set_takes_top_k() {
        let b = MockBackend::new(
            vec![
                ("x".into(), vec![0.7f64.ln(), 0.0]),
                ("y".into(), vec![0.2f64.ln(), 0.0]),
                ("z".into(), vec![0.1f64.ln(), 0.0]),
            ],
            0.0,
            64,
        )
        .unwrap();
        let c = candidate_set(&b, &[1.0, 0.0], 2).unwrap();
        let words: Vec<&str> = c.words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, vec!["x", "y"]);
    }

    #[test]
    fn candidate_set_caps_at_vocab_size() {
        let b = MockBackend::new(vec![("x".into(), vec![1.0]), ("y".into(), vec![0.5])], 0.0, 64).unwrap();
        let c = candidate_set(&b, &[1.0], 10).unwrap();
        assert_eq!(c.len(), 2);
    }

    #[test]
    fn candidate_set_breaks_ties_by_vocab_id() {
        // Logits [2, 1, 1]: the K-th slot ties between ids 1 and 2; the
        // lower id wins.
        let b = MockBackend::new(
            vec![
                ("x".into(), vec![1.0, 0.0]),
                ("y".into(), vec![0.0, 1.0]),
                ("z".into(), vec![0.0, 1.0]),
            ],
            0.0,
            64,
        )
        .unwrap();
        let c = candidate_set(&b, &[2.0, 1.0], 2).unwrap();
        let words: Vec<&str> = c.words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, vec!["x", "y"]);
    }

    #[test]
    fn vocabulary_frequency_rule() {
        let sets = [set(&["x", "y", "z"]), set(&["y", "z", "w"])];
        let v = build_attribute_vocabulary("val", &sets, 2, &HashSet::new()).unwrap();
        let words: Vec<&str> = v.words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, vec!["y", "z"]);
        assert_eq!(v.words[0].1, 2);
    }

    #[test]
    fn vocabulary_skips_stopwords_and_breaks_frequency_ties_lexicographically() {
        // "the" is a stopword; z keeps frequency 2; w and x tie at 1 and the
        // lexicographically smaller word (w) fills the last slot.
        let sets = [set(&["x", "the", "z"]), set(&["the", "z", "w"])];
        let v = build_attribute_vocabulary("val", &sets, 2, &HashSet::new()).unwrap();
        let words: Vec<&str> = v.words.iter().map(|(w, _)| w.as_str()).collect();
        assert_eq!(words, vec!["z", "w"]);
    }

    #[test]
    fn vocabulary_smaller_than_cap_keeps_everything() {
        let sets: Vec<BTreeSet<String>> = (0..10)
            .map(|i| set(&[&format!("w{}", i * 4), &format!("w{}", i * 4 + 1), &format!("w{}", i * 4 + 2), &format!("w{}", i * 4 + 3)]))
            .collect();
        let v = build_attribute_vocabulary("val", &sets, 100, &HashSet::new()).unwrap();
        assert_eq!(v.len(), 40);
    }

    #[test]
    fn similarity_examples() {
        let c = CandidateSet { words: vec![("b".into(), 0.5), ("c".into(), 0.3), ("d".into(), 0.2)] };
        assert_eq!(similarity(&c, &vocab("v", &["b", "c", "e", "f"])).unwrap(), 0.5);
        assert_eq!(similarity(&c, &vocab("v", &["p", "r"])).unwrap(), 0.0);
        assert_eq!(similarity(&c, &vocab("v", &["b", "c"])).unwrap(), 1.0);
        // 9 of 20 vocabulary words present: exactly 0.45.
        let wide: Vec<String> = (0..9).map(|i| format!("w{i}")).chain((9..20).map(|i| format!("zz{i}"))).collect();
        let wide_refs: Vec<&str> = wide.iter().map(String::as_str).collect();
        let c9 = CandidateSet { words: (0..9).map(|i| (format!("w{i}"), 0.1)).collect() };
        assert_eq!(similarity(&c9, &vocab("v", &wide_refs)).unwrap(), 0.45);
        assert!(matches!(
            similarity(&c, &AttributeVocabulary { value: "v".into(), words: vec![] }),
            Err(MiningError::EmptyVocabulary)
        ));
    }

    /// Backend whose candidate sets equal the whole vocabulary (K is large),
    /// so similarity is fully controlled by vocabulary membership.
    fn flat_backend(words: &[&str]) -> MockBackend {
        MockBackend::new(words.iter().map(|w| (w.to_string(), vec![1.0])).collect(), 0.0, 64).unwrap()
    }

    #[test]
    fn extraction_threshold_is_strict() {
        let b = flat_backend(&["a", "b"]);
        let docs = [MiningDoc { doc_id: "d".into(), text: "a b".into() }];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 10, beta: 0.4, ..Default::default() };
        // Candidate sets contain both backend words. A 5-word vocabulary
        // with 2 backend words overlaps at exactly 2/5 = 0.4: excluded.
        let at_boundary = vocab("v", &["a", "b", "zz1", "zz2", "zz3"]);
        let out = extract_word_supervision(&analyzed, &[at_boundary], &b, &params).unwrap();
        assert!(out.is_empty());
        // 3 of 5 present: 0.6 > 0.4, every wordlike occurrence is emitted
        // with confidence 0.45? No: confidence = 0.6.
        let above = vocab("v", &["a", "b", "zz1", "zz2"]);
        let out = extract_word_supervision(&analyzed, &[above], &b, &params).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out.entries[0].confidence, 0.5);
    }

    #[test]
    fn extraction_drops_exact_argmax_ties() {
        let b = flat_backend(&["a"]);
        let docs = [MiningDoc { doc_id: "d".into(), text: "a".into() }];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 10, beta: 0.4, ..Default::default() };
        let v1 = vocab("v1", &["a", "zz"]);
        let v2 = vocab("v2", &["a", "qq"]);
        let out = extract_word_supervision(&analyzed, &[v1.clone(), v2], &b, &params).unwrap();
        assert!(out.is_empty(), "tied best similarity must be dropped");
        let out = extract_word_supervision(&analyzed, &[v1], &b, &params).unwrap();
        assert_eq!(out.len(), 1);
    }

    /// Clustered backend: two topic clusters plus neutral filler, mirroring
    /// how the end-to-end fixture is built.
    fn clustered_backend() -> MockBackend {
        let mut words: Vec<(String, Vec<f64>)> = Vec::new();
        let dim = 6;
        let vec_at = |i: usize, scale: f64| {
            let mut v = vec![0.0; dim];
            v[i] = scale;
            v
        };
        // Cluster A: dentist + dental words around axes 0/1.
        words.push(("dentist".into(), vec_at(0, 1.0)));
        for (i, w) in ["teeth", "cavity", "molar"].iter().enumerate() {
            let mut v = vec_at(1, 1.0);
            v[3 + i % 2] += 0.05;
            words.push((w.to_string(), v));
        }
        // Cluster B: teacher + school words around axis 2.
        words.push(("teacher".into(), vec_at(2, 1.0)));
        for w in ["chalk", "lesson", "pupils"] {
            let mut v = vec_at(2, 0.0);
            v[2] = 0.0;
            v[3] = 1.0;
            v[4] += if w == "chalk" { 0.05 } else { 0.0 };
            words.push((w.to_string(), v));
        }
        // Filler far from both clusters.
        words.push(("pizza".into(), vec_at(5, 1.0)));
        words.push(("cloud".into(), {
            let mut v = vec_at(5, 1.0);
            v[4] = 0.3;
            v
        }));
        MockBackend::new(words, 0.6, 64).unwrap()
    }

    #[test]
    fn extraction_matches_per_position_brute_force() {
        // Plant two indicative words in a ten-word document and check the
        // extractor against a position-by-position recomputation.
        let b = clustered_backend();
        let doc = MiningDoc {
            doc_id: "d0".into(),
            text: "pizza teeth cavity cloud pizza chalk lesson cloud pizza cloud".into(),
        };
        let analyzed = AnalyzedDoc::analyze(&b, &doc).unwrap();
        let params = MiningParams { k: 4, m: 5, beta: 0.4, ..Default::default() };
        let va = vocab("dentist", &["teeth", "cavity", "molar"]);
        let vb = vocab("teacher", &["chalk", "lesson", "pupils"]);
        let out =
            extract_word_supervision(std::slice::from_ref(&analyzed), &[va.clone(), vb.clone()], &b, &params)
                .unwrap();

        // Brute force: every position against every vocabulary.
        let mut expected = Vec::new();
        for (wi, span) in analyzed.tokenized.word_spans.iter().enumerate() {
            let emb = analyzed.head_embedding(&b, wi, false).unwrap();
            let cand = candidate_set(&b, &emb, params.k).unwrap();
            let sims = [similarity(&cand, &va).unwrap(), similarity(&cand, &vb).unwrap()];
            let best = if sims[0] >= sims[1] { 0 } else { 1 };
            let tied = sims[0] == sims[1];
            if !tied && sims[best] > params.beta {
                expected.push((span.word.clone(), [&va, &vb][best].value.clone(), sims[best], wi));
            }
        }
        assert!(!expected.is_empty(), "fixture should plant indicative words");
        assert_eq!(out.len(), expected.len());
        for (entry, (word, label, confidence, token_index)) in out.entries.iter().zip(&expected) {
            assert_eq!(&entry.word, word);
            assert_eq!(&entry.label, label);
            assert_eq!(entry.confidence, *confidence);
            assert_eq!(entry.token_index, *token_index);
        }
    }

    #[test]
    fn stored_confidence_equals_recomputed_similarity() {
        let b = clustered_backend();
        let docs = vec![
            MiningDoc { doc_id: "d0".into(), text: "teeth cavity molar dentist pizza".into() },
            MiningDoc { doc_id: "d1".into(), text: "chalk lesson pupils teacher cloud".into() },
        ];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 4, m: 5, beta: 0.3, ..Default::default() };
        let vocabs = [vocab("dentist", &["teeth", "cavity", "molar"]), vocab("teacher", &["chalk", "lesson", "pupils"])];
        let out = extract_word_supervision(&analyzed, &vocabs, &b, &params).unwrap();
        assert!(!out.is_empty());
        for entry in &out.entries {
            let doc = analyzed.iter().find(|d| d.doc_id == entry.doc_id).unwrap();
            let wi = doc
                .tokenized
                .word_spans
                .iter()
                .position(|s| s.head_token() == entry.token_index)
                .unwrap();
            let emb = doc.head_embedding(&b, wi, false).unwrap();
            let cand = candidate_set(&b, &emb, params.k).unwrap();
            let v = vocabs.iter().find(|v| v.value == entry.label).unwrap();
            assert_eq!(entry.confidence, similarity(&cand, v).unwrap());
        }
    }

    #[test]
    fn two_pass_build_discards_shared_words() {
        // "shared" correlates with both value words, so it lands in both
        // provisional vocabularies; with a 0.5 threshold (2 of 2 > 1) it is
        // discarded from both finals. Cluster words stay.
        let b = MockBackend::new(
            vec![
                ("dentist".into(), vec![1.0, 0.0, 0.0]),
                ("teeth".into(), vec![1.0, 0.0, 0.1]),
                ("teacher".into(), vec![0.0, 1.0, 0.0]),
                ("chalk".into(), vec![0.0, 1.0, 0.1]),
                ("shared".into(), vec![0.7, 0.7, 0.0]),
            ],
            0.0,
            64,
        )
        .unwrap();
        let schema = AttributeSchema::new(
            "p".into(),
            vec![
                AttributeValue { surface: "dentist".into(), wiki_page: None, wiki_categories: vec![] },
                AttributeValue { surface: "teacher".into(), wiki_page: None, wiki_categories: vec![] },
            ],
        )
        .unwrap();
        let docs = vec![
            MiningDoc { doc_id: "a".into(), text: "dentist shared teeth".into() },
            MiningDoc { doc_id: "b".into(), text: "teacher shared chalk".into() },
        ];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 3, m: 10, beta: 0.4, cross_vocab_threshold: 0.5, masked: false };
        let build = build_all_vocabularies(&schema, &analyzed, &b, &params).unwrap();
        assert_eq!(build.discarded_words, vec!["shared".to_string()]);
        assert_eq!(build.vocabularies.len(), 2);
        for vocabulary in &build.vocabularies {
            assert!(!vocabulary.words.iter().any(|(w, _)| w == "shared"), "{:?}", vocabulary.words);
            assert!(!vocabulary.is_empty());
        }
    }

    #[test]
    fn all_vocabularies_failing_is_an_error() {
        // A zero cross-vocab threshold discards every counted word, leaving
        // every final vocabulary empty.
        let b = flat_backend(&["dentist", "teacher", "teeth"]);
        let schema = AttributeSchema::new(
            "p".into(),
            vec![
                AttributeValue { surface: "dentist".into(), wiki_page: None, wiki_categories: vec![] },
                AttributeValue { surface: "teacher".into(), wiki_page: None, wiki_categories: vec![] },
            ],
        )
        .unwrap();
        let docs = vec![MiningDoc { doc_id: "a".into(), text: "dentist teeth teacher".into() }];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 5, m: 5, beta: 0.4, cross_vocab_threshold: 0.0, masked: false };
        assert!(matches!(
            build_all_vocabularies(&schema, &analyzed, &b, &params),
            Err(MiningError::AllVocabulariesFailed)
        ));
    }

    #[test]
    fn fallback_seeds_missing_value_from_template() {
        let b = clustered_backend();
        let schema = AttributeSchema::new(
            "p".into(),
            vec![
                AttributeValue { surface: "dentist".into(), wiki_page: None, wiki_categories: vec![] },
                AttributeValue { surface: "teacher".into(), wiki_page: None, wiki_categories: vec![] },
            ],
        )
        .unwrap();
        // Only dentist-related text: "teacher" never occurs.
        let docs = vec![MiningDoc { doc_id: "a".into(), text: "dentist teeth cavity".into() }];
        let analyzed: Vec<AnalyzedDoc> = docs.iter().map(|d| AnalyzedDoc::analyze(&b, d).unwrap()).collect();
        let params = MiningParams { k: 4, m: 6, beta: 0.4, cross_vocab_threshold: 0.9, masked: false };
        let build = build_all_vocabularies(&schema, &analyzed, &b, &params).unwrap();
        assert_eq!(build.fallback_values, vec!["teacher".to_string()]);
        let teacher = build.vocabularies.iter().find(|v| v.value == "teacher").unwrap();
        assert!(teacher.words.iter().any(|(w, _)| w == "teacher"), "content word seeded: {:?}", teacher.words);
    }

    #[test]
    fn multi_word_value_occurrences_are_contiguous_and_unioned() {
        let b = flat_backend(&["dental", "surgeon", "teeth", "pizza"]);
        let doc = MiningDoc { doc_id: "d".into(), text: "pizza dental surgeon teeth dental pizza surgeon".into() };
        let analyzed = AnalyzedDoc::analyze(&b, &doc).unwrap();
        let v = AttributeValue { surface: "Dental_Surgeon".into(), wiki_page: None, wiki_categories: vec![] };
        let occ = find_occurrences(&analyzed, &v.content_words());
        // Only the contiguous "dental surgeon" at word indices 1..3 matches.
        assert_eq!(occ, vec![vec![1, 2]]);
        let params = MiningParams { k: 2, ..Default::default() };
        let sets = occurrence_sets_for_value(&v, std::slice::from_ref(&analyzed), &b, &params).unwrap();
        assert_eq!(sets.len(), 1);
        // Union of the two positions' candidate sets can exceed K.
        assert!(sets[0].len() >= 2);
    }

    #[test]
    fn vocab_file_names_are_sanitized() {
        assert_eq!(sanitize_value_name("Software_Developer"), "software_developer");
        assert_eq!(sanitize_value_name("rock & roll / punk"), "rock___roll___punk");
    }

    #[test]
    fn word_supervision_round_trip_and_validation() {
        let schema = AttributeSchema::new(
            "p".into(),
            vec![AttributeValue { surface: "dentist".into(), wiki_page: None, wiki_categories: vec![] }],
        )
        .unwrap();
        let ws = WordSupervision {
            entries: vec![WordSupervisionEntry {
                doc_id: "utt:u1:0".into(),
                token_index: 3,
                word: "teeth".into(),
                label: "dentist".into(),
                confidence: 0.62,
            }],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_word_supervision(&ws, f.path()).unwrap();
        let again = read_word_supervision(f.path(), &schema, 0.4).unwrap();
        assert_eq!(ws, again);
        // Confidence at or below beta is rejected on read.
        assert!(read_word_supervision(f.path(), &schema, 0.62).is_err());
    }
}

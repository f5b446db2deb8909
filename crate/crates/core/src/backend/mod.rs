//! Abstraction over a pre-trained masked language model: tokenization with
//! word alignment, contextualized encoding, and the MLM-head vocabulary
//! distribution. Two implementations exist: [`mock::MockBackend`] with
//! hand-specified linear maps for exact tests, and [`bert::BertBackend`]
//! which loads pre-trained weights from a local directory. Everything
//! downstream depends only on the [`MlmBackend`] trait.

pub mod bert;
pub mod mock;
pub mod wordpiece;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("sequence of {len} tokens exceeds the backend maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("embedding dimension {got} does not match backend dimension {want}")]
    DimensionMismatch { got: usize, want: usize },
    #[error("failed to load backend weights: {0}")]
    Weights(String),
    #[error("backend failure: {0}")]
    Internal(String),
}

impl From<candle_core::Error> for BackendError {
    fn from(e: candle_core::Error) -> Self {
        BackendError::Internal(e.to_string())
    }
}

/// One input word and where its tokens and characters live.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    /// Token range (half-open) within the content tokens.
    pub token_start: usize,
    pub token_end: usize,
    /// Character offsets (half-open) within the input text.
    pub char_start: usize,
    pub char_end: usize,
}

impl WordSpan {
    /// Index of the token whose embedding represents this word: the first
    /// sub-token by convention.
    pub fn head_token(&self) -> usize {
        self.token_start
    }
}

/// Content tokens of a text with the word-to-token alignment. Special
/// positions the backend may add around a window are not part of this.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenizedText {
    pub token_ids: Vec<u32>,
    pub word_spans: Vec<WordSpan>,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Per-token contextual vectors plus the sequence-level vector used for
/// document classification.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings {
    pub token_vectors: Vec<Vec<f64>>,
    pub sequence_vector: Vec<f64>,
}

/// A probability distribution over the backend vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    pub probs: Vec<f64>,
}

/// How the sequence-level vector is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Pooling {
    /// The encoder's designated first-position summary vector.
    #[serde(rename = "cls")]
    Cls,
    /// Mean of the content-token vectors, for backends without a summary
    /// position.
    #[serde(rename = "mean")]
    Mean,
}

pub trait MlmBackend: Send + Sync {
    /// Deterministic tokenization with word-to-token alignment preserved.
    fn tokenize(&self, text: &str) -> TokenizedText;

    /// One vector per content token plus the sequence-level vector.
    /// Fails with `SequenceTooLong` when the window exceeds
    /// [`MlmBackend::max_content_len`].
    fn encode(&self, tokens: &TokenizedText) -> Result<ContextEmbeddings, BackendError>;

    /// The pre-trained MLM head applied to one contextual embedding.
    fn mlm_distribution(&self, embedding: &[f64]) -> Result<VocabDistribution, BackendError>;

    fn hidden_size(&self) -> usize;

    /// Maximum number of content tokens per encoded window.
    fn max_content_len(&self) -> usize;

    fn vocab_size(&self) -> usize;

    /// Word string for a vocabulary id; `None` for special or non-word
    /// entries (sub-word continuations, punctuation-only, reserved ids).
    fn vocab_word(&self, id: u32) -> Option<&str>;

    /// Id of the mask token when the backend has one.
    fn mask_token_id(&self) -> Option<u32>;
}

/// A slice of a longer tokenization, with the offsets needed to map global
/// token/word indices into the window.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub token_offset: usize,
    pub word_offset: usize,
    pub tokens: TokenizedText,
}

/// Splits a tokenization into maximal non-overlapping windows of at most
/// `max_content` tokens. Cuts fall on word boundaries unless a single word
/// is itself longer than `max_content`, in which case the word is split.
/// An empty tokenization yields one empty window.
pub fn split_windows(text: &TokenizedText, max_content: usize) -> Vec<Window> {
    assert!(max_content > 0, "window size must be positive");
    if text.token_ids.is_empty() {
        return vec![Window { token_offset: 0, word_offset: 0, tokens: TokenizedText::default() }];
    }
    let mut windows = Vec::new();
    let mut token_cursor = 0usize;
    let mut word_cursor = 0usize;
    while token_cursor < text.token_ids.len() {
        let hard_end = (token_cursor + max_content).min(text.token_ids.len());
        // Retreat to the last word boundary at or before hard_end.
        let mut end = token_cursor;
        let mut word_end = word_cursor;
        for (wi, span) in text.word_spans.iter().enumerate().skip(word_cursor) {
            if span.token_end <= hard_end {
                end = end.max(span.token_end);
                word_end = wi + 1;
            } else {
                break;
            }
        }
        let mut split_word = None;
        if end <= token_cursor {
            // A single word longer than the window: split inside it.
            end = hard_end;
            if word_cursor < text.word_spans.len() && text.word_spans[word_cursor].token_start < end {
                split_word = Some(word_cursor);
                word_end = word_cursor + 1;
            }
        }
        let token_ids = text.token_ids[token_cursor..end].to_vec();
        let mut word_spans = Vec::new();
        for wi in word_cursor..word_end {
            let span = &text.word_spans[wi];
            // Clamp: a word split across windows contributes only the
            // tokens that fall inside this one.
            let start = span.token_start.max(token_cursor);
            let stop = span.token_end.min(end);
            if start >= stop {
                continue;
            }
            word_spans.push(WordSpan {
                word: span.word.clone(),
                token_start: start - token_cursor,
                token_end: stop - token_cursor,
                char_start: span.char_start,
                char_end: span.char_end,
            });
        }
        windows.push(Window {
            token_offset: token_cursor,
            word_offset: word_cursor,
            tokens: TokenizedText { token_ids, word_spans },
        });
        // A split word stays current until all its tokens are consumed.
        if let Some(wi) = split_word {
            if text.word_spans[wi].token_end > end {
                word_cursor = wi;
            } else {
                word_cursor = wi + 1;
            }
        } else {
            word_cursor = word_end;
        }
        token_cursor = end;
    }
    windows
}

/// The window containing global token index `idx`, with the local index.
pub fn window_for_token(windows: &[Window], idx: usize) -> Option<(&Window, usize)> {
    windows
        .iter()
        .find(|w| idx >= w.token_offset && idx < w.token_offset + w.tokens.len())
        .map(|w| (w, idx - w.token_offset))
}

pub(crate) fn softmax_inplace(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

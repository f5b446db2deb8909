//! Deterministic test backend: a whitespace tokenizer over a small fixed
//! vocabulary, a linear context-mixing encoder, and a tied-embedding MLM
//! head. Every number it produces can be recomputed by hand, which is what
//! the exact expectations in the test suite rely on.
//!
//! Encoder: for tokens `t_1..t_n`, the contextual vector is
//! `h_i = E[t_i] + alpha * mean(E[t_j])` over the existing neighbors
//! `j in {i-1, i+1}`; the sequence vector is the mean of the `h_i`
//! (the mock has no summary position, so pooling is always `mean`).
//! MLM head: `softmax(E h)`, i.e. the generic `softmax(W2 phi(W1 h + b))`
//! with `W1 = I`, `phi = id`, `b = 0`, and `W2` tied to the embeddings.

use std::collections::HashMap;
use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{softmax_inplace, BackendError, ContextEmbeddings, MlmBackend, TokenizedText, VocabDistribution, WordSpan};
use crate::text;

/// Sentinel id for out-of-vocabulary tokens; not part of the vocabulary.
pub const UNK_ID: u32 = u32::MAX;

/// On-disk description of a mock backend: `{"alpha", "max_len", "words":
/// [{"word", "vector"}, ...]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockSpec {
    pub alpha: f64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub words: Vec<MockWord>,
}

fn default_max_len() -> usize {
    4096
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockWord {
    pub word: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MockBackend {
    words: Vec<String>,
    ids: HashMap<String, u32>,
    embeddings: Vec<Vec<f64>>,
    alpha: f64,
    hidden: usize,
    max_content: usize,
}

impl MockBackend {
    pub fn new(words: Vec<(String, Vec<f64>)>, alpha: f64, max_content: usize) -> Result<Self, BackendError> {
        if words.is_empty() {
            return Err(BackendError::Weights("mock vocabulary is empty".into()));
        }
        let hidden = words[0].1.len();
        if hidden == 0 {
            return Err(BackendError::Weights("mock embeddings have zero dimension".into()));
        }
        let mut ids = HashMap::new();
        let mut names = Vec::with_capacity(words.len());
        let mut embeddings = Vec::with_capacity(words.len());
        for (i, (word, vector)) in words.into_iter().enumerate() {
            if vector.len() != hidden {
                return Err(BackendError::Weights(format!(
                    "embedding for {word:?} has dimension {} (expected {hidden})",
                    vector.len()
                )));
            }
            if ids.insert(text::normalize(&word), i as u32).is_some() {
                return Err(BackendError::Weights(format!("duplicate mock vocabulary word {word:?}")));
            }
            names.push(word);
            embeddings.push(vector);
        }
        Ok(Self { words: names, ids, embeddings, alpha, hidden, max_content })
    }

    pub fn from_spec(spec: MockSpec) -> Result<Self, BackendError> {
        let words = spec.words.into_iter().map(|w| (w.word, w.vector)).collect();
        Self::new(words, spec.alpha, spec.max_len)
    }

    pub fn load_spec(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path)
            .map_err(|e| BackendError::Weights(format!("cannot open {}: {e}", path.display())))?;
        let spec: MockSpec = serde_json::from_reader(BufReader::new(file))
            .map_err(|e| BackendError::Weights(format!("{}: {e}", path.display())))?;
        Self::from_spec(spec)
    }

    /// Overrides the window size (the pipeline config wins over the spec).
    pub fn with_max_content(mut self, max_content: usize) -> Self {
        self.max_content = max_content;
        self
    }

    pub fn to_spec(&self) -> MockSpec {
        MockSpec {
            alpha: self.alpha,
            max_len: self.max_content,
            words: self
                .words
                .iter()
                .zip(&self.embeddings)
                .map(|(w, v)| MockWord { word: w.clone(), vector: v.clone() })
                .collect(),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn embedding(&self, id: u32) -> Option<&[f64]> {
        self.embeddings.get(id as usize).map(Vec::as_slice)
    }

    /// Mutable embedding table access for the training step.
    pub(crate) fn embeddings_mut(&mut self) -> &mut Vec<Vec<f64>> {
        &mut self.embeddings
    }

    fn row(&self, id: u32) -> Option<&[f64]> {
        if id == UNK_ID {
            None
        } else {
            Some(self.embeddings[id as usize].as_slice())
        }
    }
}

impl MlmBackend for MockBackend {
    fn tokenize(&self, input: &str) -> TokenizedText {
        let mut token_ids = Vec::new();
        let mut word_spans = Vec::new();
        let mut char_pos = 0usize;
        let mut chars = input.char_indices().peekable();
        while let Some(&(start, c)) = chars.peek() {
            if c.is_whitespace() {
                chars.next();
                char_pos = start + c.len_utf8();
                continue;
            }
            let mut end = start;
            while let Some(&(i, ch)) = chars.peek() {
                if ch.is_whitespace() {
                    break;
                }
                end = i + ch.len_utf8();
                chars.next();
            }
            let word = &input[start..end];
            let id = self.ids.get(&text::normalize(word)).copied().unwrap_or(UNK_ID);
            let index = token_ids.len();
            token_ids.push(id);
            word_spans.push(WordSpan {
                word: word.to_owned(),
                token_start: index,
                token_end: index + 1,
                char_start: start,
                char_end: end,
            });
            char_pos = end;
        }
        let _ = char_pos;
        TokenizedText { token_ids, word_spans }
    }

    fn encode(&self, tokens: &TokenizedText) -> Result<ContextEmbeddings, BackendError> {
        let n = tokens.token_ids.len();
        if n > self.max_content {
            return Err(BackendError::SequenceTooLong { len: n, max: self.max_content });
        }
        let zero = vec![0.0; self.hidden];
        let emb = |id: u32| -> &[f64] { self.row(id).unwrap_or(&zero) };
        let mut token_vectors = Vec::with_capacity(n);
        for i in 0..n {
            let mut h = emb(tokens.token_ids[i]).to_vec();
            let neighbors: Vec<usize> = [i.checked_sub(1), (i + 1 < n).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            if !neighbors.is_empty() {
                let scale = self.alpha / neighbors.len() as f64;
                for &j in &neighbors {
                    let e = emb(tokens.token_ids[j]);
                    for (hk, ek) in h.iter_mut().zip(e) {
                        *hk += scale * ek;
                    }
                }
            }
            token_vectors.push(h);
        }
        let mut sequence_vector = vec![0.0; self.hidden];
        if n > 0 {
            for v in &token_vectors {
                for (s, x) in sequence_vector.iter_mut().zip(v) {
                    *s += x;
                }
            }
            for s in sequence_vector.iter_mut() {
                *s /= n as f64;
            }
        }
        Ok(ContextEmbeddings { token_vectors, sequence_vector })
    }

    fn mlm_distribution(&self, embedding: &[f64]) -> Result<VocabDistribution, BackendError> {
        if embedding.len() != self.hidden {
            return Err(BackendError::DimensionMismatch { got: embedding.len(), want: self.hidden });
        }
        let mut logits: Vec<f64> = self
            .embeddings
            .iter()
            .map(|row| row.iter().zip(embedding).map(|(a, b)| a * b).sum())
            .collect();
        softmax_inplace(&mut logits);
        Ok(VocabDistribution { probs: logits })
    }

    fn hidden_size(&self) -> usize {
        self.hidden
    }

    fn max_content_len(&self) -> usize {
        self.max_content
    }

    fn vocab_size(&self) -> usize {
        self.words.len()
    }

    fn vocab_word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    fn mask_token_id(&self) -> Option<u32> {
        None
    }
}

//! Uncased basic + WordPiece tokenization compatible with `vocab.txt`
//! vocabularies: lowercasing with accent stripping, punctuation splitting,
//! then greedy longest-match sub-word segmentation with `##` continuations.

use std::collections::HashMap;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use super::{BackendError, TokenizedText, WordSpan};

pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const MASK_TOKEN: &str = "[MASK]";

/// A word pulled out by the basic tokenizer, with offsets into the original
/// text.
struct BasicToken {
    text: String,
    char_start: usize,
    char_end: usize,
}

#[derive(Debug, Clone)]
pub struct WordPieceTokenizer {
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    lowercase: bool,
    max_chars_per_word: usize,
}

impl WordPieceTokenizer {
    pub fn from_vocab(vocab: Vec<String>, lowercase: bool) -> Result<Self, BackendError> {
        if vocab.is_empty() {
            return Err(BackendError::Weights("empty vocab.txt".into()));
        }
        let mut ids = HashMap::with_capacity(vocab.len());
        for (i, tok) in vocab.iter().enumerate() {
            // Later duplicates are unreachable by lookup, matching common
            // vocab files that repeat placeholder entries.
            ids.entry(tok.clone()).or_insert(i as u32);
        }
        for required in [UNK_TOKEN, CLS_TOKEN, SEP_TOKEN, PAD_TOKEN] {
            if !ids.contains_key(required) {
                return Err(BackendError::Weights(format!("vocab.txt lacks {required}")));
            }
        }
        Ok(Self { vocab, ids, lowercase, max_chars_per_word: 100 })
    }

    pub fn from_vocab_file(path: &Path, lowercase: bool) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Weights(format!("cannot read {}: {e}", path.display())))?;
        let vocab: Vec<String> = raw.lines().map(|l| l.trim_end_matches('\r').to_owned()).collect();
        Self::from_vocab(vocab, lowercase)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn unk_id(&self) -> u32 {
        self.ids[UNK_TOKEN]
    }

    pub fn cls_id(&self) -> u32 {
        self.ids[CLS_TOKEN]
    }

    pub fn sep_id(&self) -> u32 {
        self.ids[SEP_TOKEN]
    }

    pub fn pad_id(&self) -> u32 {
        self.ids[PAD_TOKEN]
    }

    pub fn mask_id(&self) -> Option<u32> {
        self.ids.get(MASK_TOKEN).copied()
    }

    /// True for entries that cannot act as candidate replacement words:
    /// reserved `[...]` tokens, `##` continuations, `<...>` style specials,
    /// and entries with no alphanumeric character.
    pub fn is_special_or_nonword(&self, id: u32) -> bool {
        match self.token(id) {
            None => true,
            Some(tok) => {
                tok.starts_with("##")
                    || (tok.starts_with('[') && tok.ends_with(']'))
                    || (tok.starts_with('<') && tok.ends_with('>'))
                    || !tok.chars().any(|c| c.is_alphanumeric())
            }
        }
    }

    /// Basic tokenization: NFC, optional lowercase + accent stripping,
    /// punctuation split into standalone tokens, whitespace separation.
    /// Offsets refer to characters of the original input.
    fn basic_tokenize(&self, input: &str) -> Vec<BasicToken> {
        // Per-char transform with original char indices retained.
        let mut chars: Vec<(char, usize)> = Vec::new();
        for (i, c) in input.chars().enumerate() {
            if c == '\u{0}' || c == '\u{fffd}' || is_control(c) {
                continue;
            }
            if self.lowercase {
                for folded in c.to_lowercase() {
                    // NFD-decompose and drop combining marks (accent strip).
                    for piece in folded.nfd() {
                        if !is_combining_mark(piece) {
                            chars.push((piece, i));
                        }
                    }
                }
            } else {
                chars.push((c, i));
            }
        }
        let mut tokens = Vec::new();
        let mut current: Option<BasicToken> = None;
        let flush = |current: &mut Option<BasicToken>, tokens: &mut Vec<BasicToken>| {
            if let Some(t) = current.take() {
                tokens.push(t);
            }
        };
        for (c, orig) in chars {
            if c.is_whitespace() {
                flush(&mut current, &mut tokens);
            } else if is_punctuation(c) || is_cjk(c) {
                flush(&mut current, &mut tokens);
                tokens.push(BasicToken { text: c.to_string(), char_start: orig, char_end: orig + 1 });
            } else {
                match current.as_mut() {
                    Some(t) => {
                        t.text.push(c);
                        t.char_end = orig + 1;
                    }
                    None => current = Some(BasicToken { text: c.to_string(), char_start: orig, char_end: orig + 1 }),
                }
            }
        }
        flush(&mut current, &mut tokens);
        tokens
    }

    /// Greedy longest-match-first segmentation of one basic token.
    fn wordpiece(&self, word: &str) -> Vec<u32> {
        if word.chars().count() > self.max_chars_per_word {
            return vec![self.unk_id()];
        }
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len();
            let mut found = None;
            while start < end {
                let mut piece: String = chars[start..end].iter().collect();
                if start > 0 {
                    piece = format!("##{piece}");
                }
                if let Some(id) = self.id(&piece) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => return vec![self.unk_id()],
            }
        }
        pieces
    }

    /// Full tokenization to content tokens with word alignment.
    pub fn tokenize(&self, input: &str) -> TokenizedText {
        let mut token_ids = Vec::new();
        let mut word_spans = Vec::new();
        for basic in self.basic_tokenize(input) {
            let ids = self.wordpiece(&basic.text);
            let token_start = token_ids.len();
            token_ids.extend_from_slice(&ids);
            word_spans.push(WordSpan {
                word: basic.text,
                token_start,
                token_end: token_ids.len(),
                char_start: basic.char_start,
                char_end: basic.char_end,
            });
        }
        TokenizedText { token_ids, word_spans }
    }
}

fn is_control(c: char) -> bool {
    c != '\t' && c != '\n' && c != '\r' && c.is_control()
}

fn is_combining_mark(c: char) -> bool {
    matches!(c as u32, 0x0300..=0x036f | 0x1ab0..=0x1aff | 0x1dc0..=0x1dff | 0x20d0..=0x20ff | 0xfe20..=0xfe2f)
}

/// ASCII punctuation plus unicode punctuation/symbol classes, mirroring the
/// "treat every non-letter/number ASCII as punctuation" convention.
fn is_punctuation(c: char) -> bool {
    if c.is_ascii() {
        return !c.is_ascii_alphanumeric() && !c.is_ascii_whitespace();
    }
    matches!(c as u32,
        0x2000..=0x206f | 0x2e00..=0x2e7f | 0x3000..=0x303f | 0xff00..=0xff0f
            | 0xff1a..=0xff20 | 0xff3b..=0xff40 | 0xff5b..=0xff65)
}

fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4e00..=0x9fff | 0x3400..=0x4dbf | 0x20000..=0x2a6df | 0x2a700..=0x2b73f
            | 0x2b740..=0x2b81f | 0x2b820..=0x2ceaf | 0xf900..=0xfaff | 0x2f800..=0x2fa1f)
}

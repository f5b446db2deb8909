//! Data model for conversations, attribute schemas, gold labels, and
//! encyclopedia page collections, plus the loaders for their on-disk
//! formats.
//!
//! All loaders are pure: the same file bytes always produce the same
//! in-memory value, and the resulting values are immutable.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("duplicate user_id {0:?}")]
    DuplicateUser(String),
    #[error("corpus contains no users")]
    EmptyCorpus,
    #[error("duplicate attribute value {0:?} (values collide after normalization)")]
    DuplicateValue(String),
    #[error("schema contains no values")]
    EmptySchema,
    #[error("duplicate page title {0:?} (titles collide after normalization)")]
    DuplicateTitle(String),
    #[error("gold labels: {0}")]
    InvalidGold(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io { path: path.display().to_string(), source }
}

// ---------------------------------------------------------------------------
// Conversations

/// One user of the conversation system and their utterances, in input order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub user_id: String,
    pub utterances: Vec<String>,
}

/// All users for one attribute prediction task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationCorpus {
    pub attribute_name: String,
    pub users: Vec<UserRecord>,
}

impl ConversationCorpus {
    pub fn user(&self, user_id: &str) -> Option<&UserRecord> {
        self.users.iter().find(|u| u.user_id == user_id)
    }
}

/// Joins a user's utterances, in order, with a single space. No other
/// transformation is applied.
pub fn concat_user_utterances(user: &UserRecord) -> String {
    user.utterances.join(" ")
}

/// Reads `conversations.jsonl`: one `{"user_id", "utterances"}` object per
/// line. Rejects duplicate users, records without a non-empty utterance,
/// and empty files.
pub fn load_conversation_corpus(path: &Path, attribute_name: &str) -> Result<ConversationCorpus, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut users: Vec<UserRecord> = Vec::new();
    let mut seen: HashMap<String, ()> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UserRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if record.user_id.is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "empty user_id".into(),
            });
        }
        if !record.utterances.iter().any(|u| !u.trim().is_empty()) {
            return Err(CorpusError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "user has no non-empty utterance".into(),
            });
        }
        if seen.insert(record.user_id.clone(), ()).is_some() {
            return Err(CorpusError::DuplicateUser(record.user_id));
        }
        users.push(record);
    }
    if users.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    Ok(ConversationCorpus { attribute_name: attribute_name.to_owned(), users })
}

/// Writes a corpus back to the `conversations.jsonl` format.
pub fn save_conversation_corpus(corpus: &ConversationCorpus, path: &Path) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for user in &corpus.users {
        let line = serde_json::to_string(user).expect("user record serializes");
        writeln!(w, "{line}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Attribute schema

/// One candidate attribute value and its encyclopedia anchors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeValue {
    #[serde(rename = "value")]
    pub surface: String,
    #[serde(default)]
    pub wiki_page: Option<String>,
    #[serde(default)]
    pub wiki_categories: Vec<String>,
}

impl AttributeValue {
    pub fn normalized(&self) -> String {
        text::normalize(&self.surface)
    }

    /// Normalized words of the surface form that are not stopwords. Falls
    /// back to all words when every word is a stopword.
    pub fn content_words(&self) -> Vec<String> {
        let words = text::normalized_words(&self.surface);
        let content: Vec<String> = words.iter().filter(|w| !text::is_stopword(w)).cloned().collect();
        if content.is_empty() {
            words
        } else {
            content
        }
    }
}

/// The attribute (predicate) and its closed, ordered set of candidate
/// values. The index of a value is stable and defines the classifier
/// output dimension.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    pub attribute: String,
    values: Vec<AttributeValue>,
    index: HashMap<String, usize>,
}

impl AttributeSchema {
    pub fn new(attribute: String, values: Vec<AttributeValue>) -> Result<Self, CorpusError> {
        if values.is_empty() {
            return Err(CorpusError::EmptySchema);
        }
        let mut index = HashMap::new();
        for (i, v) in values.iter().enumerate() {
            if index.insert(v.normalized(), i).is_some() {
                return Err(CorpusError::DuplicateValue(v.surface.clone()));
            }
        }
        Ok(Self { attribute, values, index })
    }

    pub fn values(&self) -> &[AttributeValue] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, idx: usize) -> &AttributeValue {
        &self.values[idx]
    }

    /// Index of a value by surface form (normalized comparison).
    pub fn index_of(&self, value: &str) -> Option<usize> {
        self.index.get(&text::normalize(value)).copied()
    }
}

#[derive(Deserialize)]
struct SchemaFile {
    attribute: String,
    values: Vec<AttributeValue>,
}

/// Reads `schema.json`. Value indices follow file order.
pub fn load_attribute_schema(path: &Path) -> Result<AttributeSchema, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let parsed: SchemaFile = serde_json::from_reader(BufReader::new(file)).map_err(|e| CorpusError::MalformedRecord {
        path: path.display().to_string(),
        line: 1,
        reason: e.to_string(),
    })?;
    AttributeSchema::new(parsed.attribute, parsed.values)
}

// ---------------------------------------------------------------------------
// Gold labels

/// Per-user gold attribute values. Kept in a separate file from the corpus
/// so the training stages physically cannot read them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct GoldLabels {
    pub entries: BTreeMap<String, BTreeSet<String>>,
}

impl GoldLabels {
    pub fn values_for(&self, user_id: &str) -> Option<&BTreeSet<String>> {
        self.entries.get(user_id)
    }
}

#[derive(Deserialize)]
struct GoldRecord {
    user_id: String,
    values: Vec<String>,
}

/// Reads `gold.jsonl` and validates every user against the corpus and every
/// value against the schema. Values are canonicalized to the schema's
/// surface forms.
pub fn load_gold_labels(
    path: &Path,
    schema: &AttributeSchema,
    corpus: &ConversationCorpus,
) -> Result<GoldLabels, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let known_users: HashMap<&str, ()> = corpus.users.iter().map(|u| (u.user_id.as_str(), ())).collect();
    let mut entries: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: GoldRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if !known_users.contains_key(record.user_id.as_str()) {
            return Err(CorpusError::InvalidGold(format!(
                "line {}: user {:?} does not exist in the corpus",
                idx + 1,
                record.user_id
            )));
        }
        if record.values.is_empty() {
            return Err(CorpusError::InvalidGold(format!(
                "line {}: user {:?} has no gold values",
                idx + 1,
                record.user_id
            )));
        }
        let set = entries.entry(record.user_id.clone()).or_default();
        for v in &record.values {
            let idx_of = schema.index_of(v).ok_or_else(|| {
                CorpusError::InvalidGold(format!("line {}: value {:?} is not in the schema", idx + 1, v))
            })?;
            set.insert(schema.value(idx_of).surface.clone());
        }
    }
    Ok(GoldLabels { entries })
}

// ---------------------------------------------------------------------------
// Encyclopedia pages

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WikiPage {
    pub title: String,
    pub text: String,
    #[serde(default)]
    pub categories: Vec<String>,
}

/// An exported page collection with a normalized-title lookup index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WikiCollection {
    pages: Vec<WikiPage>,
    by_title: HashMap<String, usize>,
}

impl WikiCollection {
    pub fn new(pages: Vec<WikiPage>) -> Result<Self, CorpusError> {
        let mut by_title = HashMap::new();
        for (i, p) in pages.iter().enumerate() {
            if by_title.insert(text::normalize(&p.title), i).is_some() {
                return Err(CorpusError::DuplicateTitle(p.title.clone()));
            }
        }
        Ok(Self { pages, by_title })
    }

    pub fn pages(&self) -> &[WikiPage] {
        &self.pages
    }

    /// Page whose normalized title equals the normalized input, if any.
    pub fn page_by_title(&self, title: &str) -> Option<&WikiPage> {
        self.by_title.get(&text::normalize(title)).map(|&i| &self.pages[i])
    }
}

/// Reads `wiki_pages.jsonl`: one `{"title", "text", "categories"}` object
/// per line. Titles must be unique after normalization and text non-empty.
pub fn load_wiki_collection(path: &Path) -> Result<WikiCollection, CorpusError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut pages = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let page: WikiPage = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if page.title.trim().is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "empty title".into(),
            });
        }
        if page.text.trim().is_empty() {
            return Err(CorpusError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "empty page text".into(),
            });
        }
        pages.push(page);
    }
    WikiCollection::new(pages)
}

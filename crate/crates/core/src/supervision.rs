//! Document-level supervision: labels encyclopedia pages with attribute
//! values by exact title matching or by category membership.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AttributeSchema, AttributeValue, WikiCollection, WikiPage};
use crate::text;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("no attribute value matched any document; supervision is empty")]
    EmptySupervision,
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("document {doc_id:?} carries unknown label {label:?}")]
    UnknownLabel { doc_id: String, label: String },
    #[error("duplicate document id {0:?}")]
    DuplicateDoc(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which part of the page collection a supervision entry came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SupervisionSource {
    #[serde(rename = "wiki-page")]
    WikiPage,
    #[serde(rename = "wiki-category")]
    WikiCategory,
}

/// External-resource mode for building document supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum WikiMode {
    #[serde(rename = "wiki-page")]
    WikiPage,
    #[serde(rename = "wiki-category")]
    WikiCategory,
}

impl fmt::Display for WikiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WikiMode::WikiPage => write!(f, "wiki-page"),
            WikiMode::WikiCategory => write!(f, "wiki-category"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocEntry {
    pub doc_id: String,
    pub text: String,
    pub label: String,
    pub source: SupervisionSource,
}

/// The set of (document, attribute value) training pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DocSupervision {
    pub entries: Vec<DocEntry>,
}

impl DocSupervision {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

/// What the build produced per value, for operator inspection.
#[derive(Debug, Clone, Default)]
pub struct BuildSummary {
    /// (value surface, number of documents), in schema order.
    pub per_value_counts: Vec<(String, usize)>,
    /// Values that obtained no document.
    pub unmatched_values: Vec<String>,
    /// Page titles claimed by more than one value, with the claimants.
    pub dropped_ambiguous: Vec<(String, Vec<String>)>,
    /// Categories listed in the schema that matched no page.
    pub unknown_categories: Vec<String>,
}

impl fmt::Display for BuildSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "document supervision coverage:")?;
        for (value, n) in &self.per_value_counts {
            writeln!(f, "  {value}: {n} document(s)")?;
        }
        if !self.unmatched_values.is_empty() {
            writeln!(f, "values without documents: {}", self.unmatched_values.join(", "))?;
        }
        for (title, values) in &self.dropped_ambiguous {
            writeln!(f, "dropped ambiguous page {:?} (claimed by {})", title, values.join(", "))?;
        }
        if !self.unknown_categories.is_empty() {
            writeln!(f, "categories matching no page: {}", self.unknown_categories.join(", "))?;
        }
        Ok(())
    }
}

/// The page whose normalized title equals the value's surface form, or the
/// schema's explicit `wiki_page` override. Exact matching only, so
/// parenthetical disambiguation titles never match a bare surface form.
pub fn match_wiki_page<'a>(value: &AttributeValue, wiki: &'a WikiCollection) -> Option<&'a WikiPage> {
    let wanted = value.wiki_page.as_deref().unwrap_or(&value.surface);
    wiki.page_by_title(wanted)
}

/// Pages matched for a value through its listed categories.
#[derive(Debug, Clone)]
pub struct CategoryMatch<'a> {
    /// Deduplicated, ordered by normalized title.
    pub pages: Vec<&'a WikiPage>,
    /// Listed categories that matched no page (warned, not fatal).
    pub unknown_categories: Vec<String>,
}

/// All pages whose category list contains any of the value's categories.
/// Category matching is by direct membership in the exported collection;
/// expand subcategory hierarchies before export if recursion is wanted.
pub fn collect_category_leaves<'a>(value: &AttributeValue, wiki: &'a WikiCollection) -> CategoryMatch<'a> {
    let wanted: Vec<String> = value.wiki_categories.iter().map(|c| text::normalize(c)).collect();
    let mut seen_titles = HashSet::new();
    let mut pages: Vec<&WikiPage> = Vec::new();
    let mut matched_categories: HashSet<usize> = HashSet::new();
    for page in wiki.pages() {
        let page_cats: Vec<String> = page.categories.iter().map(|c| text::normalize(c)).collect();
        let mut hit = false;
        for (ci, want) in wanted.iter().enumerate() {
            if page_cats.iter().any(|c| c == want) {
                matched_categories.insert(ci);
                hit = true;
            }
        }
        if hit && seen_titles.insert(text::normalize(&page.title)) {
            pages.push(page);
        }
    }
    pages.sort_by_key(|p| text::normalize(&p.title));
    let unknown_categories: Vec<String> = value
        .wiki_categories
        .iter()
        .enumerate()
        .filter(|(ci, _)| !matched_categories.contains(ci))
        .map(|(_, c)| c.clone())
        .collect();
    for c in &unknown_categories {
        log::warn!("category {:?} of value {:?} matches no page", c, value.surface);
    }
    CategoryMatch { pages, unknown_categories }
}

/// Builds document supervision for the whole schema. A page claimed by more
/// than one value is dropped from all of them: every training document must
/// carry a single label.
pub fn build_document_supervision(
    schema: &AttributeSchema,
    wiki: &WikiCollection,
    mode: WikiMode,
) -> Result<(DocSupervision, BuildSummary), SupervisionError> {
    // Pass 1: candidate pages per value.
    let mut candidates: Vec<Vec<&WikiPage>> = Vec::with_capacity(schema.len());
    let mut unknown_categories = Vec::new();
    for value in schema.values() {
        let pages = match mode {
            WikiMode::WikiPage => match_wiki_page(value, wiki).into_iter().collect(),
            WikiMode::WikiCategory => {
                let m = collect_category_leaves(value, wiki);
                unknown_categories.extend(m.unknown_categories);
                m.pages
            }
        };
        candidates.push(pages);
    }

    // Pass 2: drop pages claimed by multiple values.
    let mut claims: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
    for (vi, pages) in candidates.iter().enumerate() {
        for page in pages {
            claims.entry(text::normalize(&page.title)).or_default().insert(vi);
        }
    }
    let ambiguous: HashMap<&String, &BTreeSet<usize>> =
        claims.iter().filter(|(_, vs)| vs.len() > 1).collect();
    let mut dropped_ambiguous: Vec<(String, Vec<String>)> = Vec::new();
    for (title, claimants) in &ambiguous {
        let names: Vec<String> = claimants.iter().map(|&vi| schema.value(vi).surface.clone()).collect();
        log::warn!("page {:?} claimed by multiple values ({}); dropped", title, names.join(", "));
        dropped_ambiguous.push(((*title).clone(), names));
    }
    dropped_ambiguous.sort();

    let mut entries = Vec::new();
    let mut per_value_counts = Vec::with_capacity(schema.len());
    let mut unmatched_values = Vec::new();
    let source = match mode {
        WikiMode::WikiPage => SupervisionSource::WikiPage,
        WikiMode::WikiCategory => SupervisionSource::WikiCategory,
    };
    for (vi, pages) in candidates.iter().enumerate() {
        let value = schema.value(vi);
        let mut kept = 0;
        for page in pages {
            if ambiguous.contains_key(&text::normalize(&page.title)) {
                continue;
            }
            entries.push(DocEntry {
                doc_id: page.title.clone(),
                text: page.text.clone(),
                label: value.surface.clone(),
                source,
            });
            kept += 1;
        }
        per_value_counts.push((value.surface.clone(), kept));
        if kept == 0 {
            unmatched_values.push(value.surface.clone());
        }
    }

    if entries.is_empty() {
        return Err(SupervisionError::EmptySupervision);
    }
    let summary = BuildSummary { per_value_counts, unmatched_values, dropped_ambiguous, unknown_categories };
    Ok((DocSupervision { entries }, summary))
}

/// Writes `s_doc.jsonl`.
pub fn write_doc_supervision(s_doc: &DocSupervision, path: &Path) -> Result<(), SupervisionError> {
    let io = |e| SupervisionError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for entry in &s_doc.entries {
        let line = serde_json::to_string(entry).expect("entry serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads `s_doc.jsonl` back, validating labels against the schema and the
/// uniqueness/non-emptiness invariants.
pub fn read_doc_supervision(path: &Path, schema: &AttributeSchema) -> Result<DocSupervision, SupervisionError> {
    let io = |e| SupervisionError::Io { path: path.display().to_string(), source: e };
    let file = File::open(path).map_err(io)?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: DocEntry = serde_json::from_str(&line).map_err(|e| SupervisionError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if entry.text.is_empty() {
            return Err(SupervisionError::MalformedRecord {
                path: path.display().to_string(),
                line: idx + 1,
                reason: "empty document text".into(),
            });
        }
        if schema.index_of(&entry.label).is_none() {
            return Err(SupervisionError::UnknownLabel { doc_id: entry.doc_id, label: entry.label });
        }
        if !seen.insert(entry.doc_id.clone()) {
            return Err(SupervisionError::DuplicateDoc(entry.doc_id));
        }
        entries.push(entry);
    }
    Ok(DocSupervision { entries })
}

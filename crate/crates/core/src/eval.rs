//! Inference and evaluation: per-user value ranking with the fine-tuned
//! model, macro MRR and user-averaged nDCG, and the unsupervised BM25
//! retrieval baseline.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::split_windows;
use crate::corpus::{concat_user_utterances, AttributeSchema, GoldLabels, UserRecord};
use crate::model::{softmax, AttributeModel, ModelError};
use crate::supervision::DocSupervision;
use crate::text;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no attribute value has a gold user; nothing to evaluate")]
    NoGoldUsers,
    #[error("predicted user {0:?} has no gold labels")]
    MissingGold(String),
    #[error("document supervision is empty; the baseline has nothing to score against")]
    EmptySupervision,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord { path: String, line: usize, reason: String },
    #[error("predictions: {0}")]
    Invalid(String),
    #[error("failed to access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A user's full ordering of the schema's values with their scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub user_id: String,
    pub ranking: Vec<RankingEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingEntry {
    pub value: String,
    pub score: f64,
}

impl RankedPrediction {
    /// 1-based rank of a value, if present.
    pub fn rank_of(&self, value: &str) -> Option<usize> {
        self.ranking.iter().position(|e| e.value == value).map(|p| p + 1)
    }
}

/// Concatenates the user's utterances, classifies each maximal
/// non-overlapping window, averages the logits across windows, and ranks
/// the values by the softmax probabilities (ties broken by schema index).
pub fn rank_attribute_values(
    user: &UserRecord,
    model: &dyn AttributeModel,
    schema: &AttributeSchema,
) -> Result<RankedPrediction, EvalError> {
    if model.num_values() != schema.len() {
        return Err(EvalError::Invalid(format!(
            "model has {} outputs but schema has {} values",
            model.num_values(),
            schema.len()
        )));
    }
    let text = concat_user_utterances(user);
    let tokens = model.backend().tokenize(&text);
    let windows = split_windows(&tokens, model.backend().max_content_len());
    let mut mean_logits = vec![0.0; schema.len()];
    for window in &windows {
        let logits = model.window_logits(&window.tokens)?;
        for (m, l) in mean_logits.iter_mut().zip(&logits) {
            *m += l;
        }
    }
    for m in mean_logits.iter_mut() {
        *m /= windows.len() as f64;
    }
    let probs = softmax(&mean_logits);
    let mut order: Vec<usize> = (0..schema.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let ranking = order
        .into_iter()
        .map(|i| RankingEntry { value: schema.value(i).surface.clone(), score: probs[i] })
        .collect();
    Ok(RankedPrediction { user_id: user.user_id.clone(), ranking })
}

/// Macro mean reciprocal rank: for each attribute value, the mean of
/// `1/rank(value)` over the users whose gold set contains it; the final
/// score averages over the values that have at least one gold user.
pub fn compute_mrr(
    predictions: &[RankedPrediction],
    gold: &GoldLabels,
) -> Result<(f64, BTreeMap<String, f64>), EvalError> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for pred in predictions {
        let gold_values = gold
            .values_for(&pred.user_id)
            .ok_or_else(|| EvalError::MissingGold(pred.user_id.clone()))?;
        for value in gold_values {
            let rank = pred
                .rank_of(value)
                .ok_or_else(|| EvalError::Invalid(format!("value {value:?} missing from a ranking")))?;
            let slot = sums.entry(value.clone()).or_insert((0.0, 0));
            slot.0 += 1.0 / rank as f64;
            slot.1 += 1;
        }
    }
    if sums.is_empty() {
        return Err(EvalError::NoGoldUsers);
    }
    let per_value: BTreeMap<String, f64> = sums.into_iter().map(|(v, (s, n))| (v, s / n as f64)).collect();
    let mrr = per_value.values().sum::<f64>() / per_value.len() as f64;
    Ok((mrr, per_value))
}

/// User-averaged nDCG with binary gains over the full ranking, normalized
/// by the ideal DCG for the user's gold count.
pub fn compute_ndcg(
    predictions: &[RankedPrediction],
    gold: &GoldLabels,
) -> Result<(f64, BTreeMap<String, f64>), EvalError> {
    let mut per_user = BTreeMap::new();
    for pred in predictions {
        let gold_values = gold
            .values_for(&pred.user_id)
            .ok_or_else(|| EvalError::MissingGold(pred.user_id.clone()))?;
        let mut dcg = 0.0;
        for (pos, entry) in pred.ranking.iter().enumerate() {
            if gold_values.contains(&entry.value) {
                dcg += 1.0 / ((pos + 2) as f64).log2();
            }
        }
        let ideal: f64 = (0..gold_values.len()).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
        per_user.insert(pred.user_id.clone(), dcg / ideal);
    }
    if per_user.is_empty() {
        return Err(EvalError::NoGoldUsers);
    }
    let ndcg = per_user.values().sum::<f64>() / per_user.len() as f64;
    Ok((ndcg, per_user))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mrr: f64,
    pub ndcg: f64,
    pub per_value_rr: BTreeMap<String, f64>,
    pub per_user_ndcg: BTreeMap<String, f64>,
    pub n_users: usize,
    pub n_values_evaluated: usize,
}

pub fn evaluate(predictions: &[RankedPrediction], gold: &GoldLabels) -> Result<EvalReport, EvalError> {
    let (mrr, per_value_rr) = compute_mrr(predictions, gold)?;
    let (ndcg, per_user_ndcg) = compute_ndcg(predictions, gold)?;
    Ok(EvalReport {
        mrr,
        ndcg,
        n_users: per_user_ndcg.len(),
        n_values_evaluated: per_value_rr.len(),
        per_value_rr,
        per_user_ndcg,
    })
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    mrr: f64,
    ndcg: f64,
    per_value_rr: &'a BTreeMap<String, f64>,
    per_user_ndcg_mean: f64,
    n_users: usize,
    n_values_evaluated: usize,
}

/// Writes `metrics.json`.
pub fn write_metrics(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let io = |e| EvalError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let body = MetricsFile {
        mrr: report.mrr,
        ndcg: report.ndcg,
        per_value_rr: &report.per_value_rr,
        per_user_ndcg_mean: report.ndcg,
        n_users: report.n_users,
        n_values_evaluated: report.n_values_evaluated,
    };
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, &body).map_err(|e| EvalError::Invalid(e.to_string()))?;
    w.write_all(b"\n").map_err(io)?;
    w.flush().map_err(io)
}

// ---------------------------------------------------------------------------
// BM25 baseline

/// Okapi BM25 with the non-negative IDF form
/// `ln(1 + (N - df + 0.5)/(df + 0.5))`; query terms contribute once each
/// (query-side saturation at 1).
#[derive(Debug, Clone, Copy)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

/// Scores the user's concatenated utterances against every value's
/// supervision documents; a value's score is the maximum over its
/// documents. Values without documents rank last in schema order. Scores
/// are raw BM25, not normalized.
pub fn bm25_rank(
    user: &UserRecord,
    s_doc: &DocSupervision,
    schema: &AttributeSchema,
    params: Bm25Params,
) -> Result<RankedPrediction, EvalError> {
    if s_doc.entries.is_empty() {
        return Err(EvalError::EmptySupervision);
    }
    let docs: Vec<(usize, HashMap<String, usize>, usize)> = s_doc
        .entries
        .iter()
        .map(|entry| {
            let terms = text::retrieval_terms(&entry.text);
            let mut tf = HashMap::new();
            for t in &terms {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            let label_index = schema.index_of(&entry.label).expect("labels validated on load");
            (label_index, tf, terms.len())
        })
        .collect();
    let n_docs = docs.len() as f64;
    let avgdl = docs.iter().map(|(_, _, len)| *len).sum::<usize>() as f64 / n_docs;
    let mut df: HashMap<&str, usize> = HashMap::new();
    for (_, tf, _) in &docs {
        for term in tf.keys() {
            *df.entry(term).or_insert(0) += 1;
        }
    }

    let query: HashSet<String> = text::retrieval_terms(&concat_user_utterances(user)).into_iter().collect();
    let mut best: Vec<Option<f64>> = vec![None; schema.len()];
    for (label_index, tf, dl) in &docs {
        let mut score = 0.0;
        for term in &query {
            let Some(&freq) = tf.get(term) else { continue };
            let dfi = df[term.as_str()] as f64;
            let idf = (1.0 + (n_docs - dfi + 0.5) / (dfi + 0.5)).ln();
            let freq = freq as f64;
            let norm = freq + params.k1 * (1.0 - params.b + params.b * *dl as f64 / avgdl);
            score += idf * freq * (params.k1 + 1.0) / norm;
        }
        let slot = &mut best[*label_index];
        *slot = Some(slot.map_or(score, |s: f64| s.max(score)));
    }

    let mut scored: Vec<(usize, f64)> =
        best.iter().enumerate().filter_map(|(i, s)| s.map(|v| (i, v))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    let mut ranking: Vec<RankingEntry> = scored
        .into_iter()
        .map(|(i, score)| RankingEntry { value: schema.value(i).surface.clone(), score })
        .collect();
    for (i, slot) in best.iter().enumerate() {
        if slot.is_none() {
            ranking.push(RankingEntry { value: schema.value(i).surface.clone(), score: 0.0 });
        }
    }
    Ok(RankedPrediction { user_id: user.user_id.clone(), ranking })
}

// ---------------------------------------------------------------------------
// predictions.jsonl

pub fn write_predictions(predictions: &[RankedPrediction], path: &Path) -> Result<(), EvalError> {
    let io = |e| EvalError::Io { path: path.display().to_string(), source: e };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    for pred in predictions {
        let line = serde_json::to_string(pred).expect("prediction serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_predictions(path: &Path) -> Result<Vec<RankedPrediction>, EvalError> {
    let io = |e| EvalError::Io { path: path.display().to_string(), source: e };
    let file = File::open(path).map_err(io)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let pred: RankedPrediction = serde_json::from_str(&line).map_err(|e| EvalError::MalformedRecord {
            path: path.display().to_string(),
            line: idx + 1,
            reason: e.to_string(),
        })?;
        out.push(pred);
    }
    Ok(out)
}

/// Every ranking must be a permutation of the schema's value set.
pub fn validate_permutations(predictions: &[RankedPrediction], schema: &AttributeSchema) -> Result<(), EvalError> {
    let expected: HashSet<&str> = schema.values().iter().map(|v| v.surface.as_str()).collect();
    for pred in predictions {
        if pred.ranking.len() != schema.len() {
            return Err(EvalError::Invalid(format!(
                "user {:?}: ranking has {} entries, schema has {}",
                pred.user_id,
                pred.ranking.len(),
                schema.len()
            )));
        }
        let got: HashSet<&str> = pred.ranking.iter().map(|e| e.value.as_str()).collect();
        if got != expected {
            return Err(EvalError::Invalid(format!(
                "user {:?}: ranking is not a permutation of the schema values",
                pred.user_id
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::mock::MockBackend;
    use crate::corpus::AttributeValue;
    use crate::model::{ClassifierHead, MockModel, OptimizerParams};
    use crate::supervision::{DocEntry, SupervisionSource};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn schema(values: &[&str]) -> AttributeSchema {
        AttributeSchema::new(
            "p".into(),
            values
                .iter()
                .map(|v| AttributeValue { surface: v.to_string(), wiki_page: None, wiki_categories: vec![] })
                .collect(),
        )
        .unwrap()
    }

    fn prediction(user: &str, values: &[&str]) -> RankedPrediction {
        RankedPrediction {
            user_id: user.into(),
            ranking: values
                .iter()
                .enumerate()
                .map(|(i, v)| RankingEntry { value: v.to_string(), score: 1.0 / (i + 1) as f64 })
                .collect(),
        }
    }

    fn gold(entries: &[(&str, &[&str])]) -> GoldLabels {
        GoldLabels {
            entries: entries
                .iter()
                .map(|(u, vs)| (u.to_string(), vs.iter().map(|v| v.to_string()).collect::<BTreeSet<_>>()))
                .collect(),
        }
    }

    #[test]
    fn zero_weight_head_ranks_in_schema_order() {
        let backend =
            MockBackend::new(vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])], 0.0, 64).unwrap();
        let model = MockModel::new(backend, ClassifierHead::zeros(3, 2), OptimizerParams::with_lr(0.01));
        let s = schema(&["dentist", "teacher", "driver"]);
        let user = UserRecord { user_id: "u".into(), utterances: vec!["a b a".into()] };
        let pred = rank_attribute_values(&user, &model, &s).unwrap();
        let values: Vec<&str> = pred.ranking.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["dentist", "teacher", "driver"]);
        for e in &pred.ranking {
            assert!((e.score - 1.0 / 3.0).abs() < 1e-12);
        }
        let total: f64 = pred.ranking.iter().map(|e| e.score).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn windowed_ranking_averages_logits() {
        // max_content 2 forces three windows over six tokens; the result
        // must equal the hand-rolled mean of the per-window logits.
        let backend =
            MockBackend::new(vec![("a".into(), vec![1.0, 0.0]), ("b".into(), vec![0.0, 1.0])], 0.25, 2).unwrap();
        let head = ClassifierHead { weights: vec![vec![1.0, -0.5], vec![-0.2, 0.8]], bias: vec![0.1, -0.1] };
        let model = MockModel::new(backend, head, OptimizerParams::with_lr(0.01));
        let s = schema(&["x", "y"]);
        let user = UserRecord { user_id: "u".into(), utterances: vec!["a b".into(), "b b a a".into()] };
        let pred = rank_attribute_values(&user, &model, &s).unwrap();

        let tokens = model.backend().tokenize("a b b b a a");
        let windows = split_windows(&tokens, 2);
        assert_eq!(windows.len(), 3);
        let mut mean = vec![0.0; 2];
        for w in &windows {
            let l = model.window_logits(&w.tokens).unwrap();
            mean[0] += l[0] / 3.0;
            mean[1] += l[1] / 3.0;
        }
        let probs = softmax(&mean);
        let by_value: HashMap<&str, f64> = pred.ranking.iter().map(|e| (e.value.as_str(), e.score)).collect();
        assert!((by_value["x"] - probs[0]).abs() < 1e-12);
        assert!((by_value["y"] - probs[1]).abs() < 1e-12);
    }

    #[test]
    fn mrr_perfect_ranking_is_one() {
        let preds = vec![prediction("u1", &["a", "b"]), prediction("u2", &["b", "a"])];
        let g = gold(&[("u1", &["a"]), ("u2", &["b"])]);
        let (mrr, _) = compute_mrr(&preds, &g).unwrap();
        assert_eq!(mrr, 1.0);
    }

    #[test]
    fn mrr_three_user_fixture() {
        // u1: gold a at rank 2; u2: gold a at rank 1; u3: gold b at rank 3.
        // Per-value a: (1/2 + 1)/2 = 0.75, b: 1/3; macro MRR = 13/24.
        let preds = vec![
            prediction("u1", &["b", "a", "c"]),
            prediction("u2", &["a", "c", "b"]),
            prediction("u3", &["a", "c", "b"]),
        ];
        let g = gold(&[("u1", &["a"]), ("u2", &["a"]), ("u3", &["b"])]);
        let (mrr, per_value) = compute_mrr(&preds, &g).unwrap();
        assert!((per_value["a"] - 0.75).abs() < 1e-12);
        assert!((per_value["b"] - 1.0 / 3.0).abs() < 1e-12);
        assert!((mrr - 13.0 / 24.0).abs() < 1e-9);
        assert!((mrr - 0.541667).abs() < 1e-6);
    }

    #[test]
    fn mrr_excludes_values_without_gold_users() {
        let preds = vec![prediction("u1", &["a", "b", "c"])];
        let g = gold(&[("u1", &["a"])]);
        let (mrr, per_value) = compute_mrr(&preds, &g).unwrap();
        assert_eq!(per_value.len(), 1);
        assert_eq!(mrr, 1.0);
    }

    #[test]
    fn mrr_requires_gold_for_predicted_users() {
        let preds = vec![prediction("u1", &["a"]), prediction("ghost", &["a"])];
        let g = gold(&[("u1", &["a"])]);
        assert!(matches!(compute_mrr(&preds, &g), Err(EvalError::MissingGold(u)) if u == "ghost"));
    }

    #[test]
    fn ndcg_single_gold_fixtures() {
        let g1 = gold(&[("u", &["a"])]);
        let (ndcg, _) = compute_ndcg(&[prediction("u", &["a", "b", "c"])], &g1).unwrap();
        assert_eq!(ndcg, 1.0);
        // Gold at rank 3: 1/log2(4) = 0.5 exactly.
        let (ndcg, _) = compute_ndcg(&[prediction("u", &["b", "c", "a"])], &g1).unwrap();
        assert_eq!(ndcg, 0.5);
    }

    #[test]
    fn ndcg_two_gold_values_at_ranks_one_and_three() {
        // DCG = 1 + 1/log2(4) = 1.5; IDCG = 1 + 1/log2(3);
        // nDCG = 1.5 / 1.6309297535714575 = 0.91972078...
        let g = gold(&[("u", &["a", "c"])]);
        let (ndcg, _) = compute_ndcg(&[prediction("u", &["a", "b", "c"])], &g).unwrap();
        let expected = 1.5 / (1.0 + 1.0 / 3f64.log2());
        assert!((ndcg - expected).abs() < 1e-12);
        assert!((ndcg - 0.919_720_8).abs() < 1e-6);
    }

    #[test]
    fn rank_improvement_never_hurts() {
        // Swapping a gold value one rank up never decreases nDCG or its
        // reciprocal-rank contribution.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let values: Vec<String> = (0..8).map(|i| format!("v{i}")).collect();
        for _ in 0..200 {
            let mut ranking: Vec<&String> = values.iter().collect();
            ranking.shuffle(&mut rng);
            let n_gold = rng.gen_range(1..4);
            let gold_set: BTreeSet<String> =
                ranking.choose_multiple(&mut rng, n_gold).map(|s| (*s).clone()).collect();
            let pos = match ranking.iter().position(|v| gold_set.contains(*v) && ranking.iter().position(|x| x == v).unwrap() > 0) {
                Some(p) if p > 0 && !gold_set.contains(ranking[p - 1]) => p,
                _ => continue,
            };
            let make_pred = |order: &[&String]| RankedPrediction {
                user_id: "u".into(),
                ranking: order
                    .iter()
                    .enumerate()
                    .map(|(i, v)| RankingEntry { value: (*v).clone(), score: 1.0 - i as f64 * 0.01 })
                    .collect(),
            };
            let g = GoldLabels { entries: [("u".to_string(), gold_set.clone())].into_iter().collect() };
            let before = compute_ndcg(&[make_pred(&ranking)], &g).unwrap().0;
            let mut improved = ranking.clone();
            improved.swap(pos - 1, pos);
            let after = compute_ndcg(&[make_pred(&improved)], &g).unwrap().0;
            assert!(after >= before - 1e-12, "ndcg decreased: {before} -> {after}");
        }
    }

    fn bm25_fixture() -> (AttributeSchema, DocSupervision) {
        let s = schema(&["dentist", "teacher"]);
        let s_doc = DocSupervision {
            entries: vec![
                DocEntry {
                    doc_id: "Dentist".into(),
                    text: "dentist teeth teeth dentist tooth".into(),
                    label: "dentist".into(),
                    source: SupervisionSource::WikiPage,
                },
                DocEntry {
                    doc_id: "Teacher".into(),
                    text: "teacher school".into(),
                    label: "teacher".into(),
                    source: SupervisionSource::WikiPage,
                },
            ],
        };
        (s, s_doc)
    }

    #[test]
    fn bm25_zero_overlap_gives_schema_order_zeros() {
        let (s, s_doc) = bm25_fixture();
        let user = UserRecord { user_id: "u".into(), utterances: vec!["quantum flux".into()] };
        let pred = bm25_rank(&user, &s_doc, &s, Bm25Params::default()).unwrap();
        let values: Vec<&str> = pred.ranking.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["dentist", "teacher"]);
        assert!(pred.ranking.iter().all(|e| e.score == 0.0));
    }

    #[test]
    fn bm25_matches_hand_computed_scores() {
        // Docs: A = [dentist teeth teeth dentist tooth] (len 5),
        //       B = [teacher school] (len 2); N = 2, avgdl = 3.5.
        // Query {teeth, school}:
        //   teeth: df 1, idf = ln(1 + 1.5/1.5) = ln 2; tf in A = 2
        //     tf-part = 2*2.2 / (2 + 1.2*(0.25 + 0.75*5/3.5))
        //   school: df 1, tf in B = 1
        //     tf-part = 1*2.2 / (1 + 1.2*(0.25 + 0.75*2/3.5))
        let (s, s_doc) = bm25_fixture();
        let user = UserRecord { user_id: "u".into(), utterances: vec!["teeth school".into()] };
        let pred = bm25_rank(&user, &s_doc, &s, Bm25Params::default()).unwrap();
        let idf = |df: f64| (1.0 + (2.0 - df + 0.5) / (df + 0.5)).ln();
        let expected_a = idf(1.0) * (2.0 * 2.2) / (2.0 + 1.2 * (0.25 + 0.75 * 5.0 / 3.5));
        let expected_b = idf(1.0) * 2.2 / (1.0 + 1.2 * (0.25 + 0.75 * 2.0 / 3.5));
        let by_value: HashMap<&str, f64> = pred.ranking.iter().map(|e| (e.value.as_str(), e.score)).collect();
        assert!((by_value["dentist"] - expected_a).abs() < 1e-12);
        assert!((by_value["teacher"] - expected_b).abs() < 1e-12);
        assert!(expected_a > expected_b);
        assert_eq!(pred.ranking[0].value, "dentist");
    }

    #[test]
    fn bm25_self_similarity_wins() {
        let (s, s_doc) = bm25_fixture();
        let user = UserRecord {
            user_id: "u".into(),
            utterances: vec!["dentist teeth teeth dentist tooth".into()],
        };
        let pred = bm25_rank(&user, &s_doc, &s, Bm25Params::default()).unwrap();
        assert_eq!(pred.ranking[0].value, "dentist");
        assert!(pred.ranking[0].score > pred.ranking[1].score);
    }

    #[test]
    fn bm25_values_without_documents_rank_last() {
        let s = schema(&["dentist", "plumber", "teacher"]);
        let s_doc = DocSupervision {
            entries: vec![DocEntry {
                doc_id: "Teacher".into(),
                text: "teacher school".into(),
                label: "teacher".into(),
                source: SupervisionSource::WikiPage,
            }],
        };
        let user = UserRecord { user_id: "u".into(), utterances: vec!["school".into()] };
        let pred = bm25_rank(&user, &s_doc, &s, Bm25Params::default()).unwrap();
        let values: Vec<&str> = pred.ranking.iter().map(|e| e.value.as_str()).collect();
        assert_eq!(values, vec!["teacher", "dentist", "plumber"]);
    }

    #[test]
    fn bm25_empty_supervision_is_an_error() {
        let s = schema(&["a"]);
        let user = UserRecord { user_id: "u".into(), utterances: vec!["x".into()] };
        assert!(matches!(
            bm25_rank(&user, &DocSupervision::default(), &s, Bm25Params::default()),
            Err(EvalError::EmptySupervision)
        ));
    }

    #[test]
    fn predictions_round_trip_and_validate() {
        let s = schema(&["a", "b"]);
        let preds = vec![prediction("u1", &["a", "b"]), prediction("u2", &["b", "a"])];
        validate_permutations(&preds, &s).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        write_predictions(&preds, f.path()).unwrap();
        assert_eq!(read_predictions(f.path()).unwrap(), preds);

        let broken = vec![prediction("u1", &["a", "a"])];
        assert!(validate_permutations(&broken, &s).is_err());
    }

    #[test]
    fn metrics_file_shape() {
        let report = EvalReport {
            mrr: 0.5,
            ndcg: 0.75,
            per_value_rr: [("a".to_string(), 0.5)].into_iter().collect(),
            per_user_ndcg: [("u".to_string(), 0.75)].into_iter().collect(),
            n_users: 1,
            n_values_evaluated: 1,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_metrics(&report, f.path()).unwrap();
        let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path()).unwrap()).unwrap();
        assert_eq!(parsed["mrr"], 0.5);
        assert_eq!(parsed["ndcg"], 0.75);
        assert_eq!(parsed["n_users"], 1);
        assert_eq!(parsed["n_values_evaluated"], 1);
        assert!(parsed["per_value_rr"].is_object());
        assert!(parsed["per_user_ndcg_mean"].is_number());
    }
}

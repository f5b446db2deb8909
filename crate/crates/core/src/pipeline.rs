//! File-based pipeline stages. Every stage is a pure function of its input
//! files and the config: rerunning a stage with unchanged inputs rewrites
//! byte-identical artifacts. Stages communicate only through the documented
//! files in the workdir.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::backend::mock::MockBackend;
use crate::backend::{bert::BertBackend, bert::BertClassifier, BackendError, MlmBackend};
use crate::config::{BackendKind, ConfigError, PipelineConfig};
use crate::corpus::{
    load_attribute_schema, load_conversation_corpus, load_gold_labels, load_wiki_collection, AttributeSchema,
    ConversationCorpus, CorpusError,
};
use crate::eval::{
    bm25_rank, evaluate, rank_attribute_values, read_predictions, validate_permutations, write_metrics,
    write_predictions, Bm25Params, EvalError, RankedPrediction,
};
use crate::mining::{
    extraction_corpus, mine_word_supervision, read_word_supervision, write_vocabularies, write_word_supervision,
    MiningError,
};
use crate::model::{AttributeModel, ClassifierHead, MockModel, ModelError, OptimizerParams};
use crate::supervision::{
    build_document_supervision, read_doc_supervision, write_doc_supervision, DocSupervision, SupervisionError,
};
use crate::train::{fine_tune, DocTable, TrainError, TrainingInstance};

pub const S_DOC_FILE: &str = "s_doc.jsonl";
pub const S_WORD_FILE: &str = "s_word.jsonl";
pub const VOCAB_DIR: &str = "vocabularies";
pub const CHECKPOINTS_DIR: &str = "checkpoints";
pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const BASELINE_PREDICTIONS_FILE: &str = "baseline_predictions.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const RUN_META_FILE: &str = "run_meta.json";

/// Stage failures split by exit-code class: environment/IO problems (1)
/// versus domain errors in data or parameters (2).
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Domain(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Io(_) => 1,
            PipelineError::Domain(_) => 2,
        }
    }
}

impl From<CorpusError> for PipelineError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::Io { .. } => PipelineError::Io(e.to_string()),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<SupervisionError> for PipelineError {
    fn from(e: SupervisionError) -> Self {
        match e {
            SupervisionError::Io { .. } => PipelineError::Io(e.to_string()),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<MiningError> for PipelineError {
    fn from(e: MiningError) -> Self {
        match e {
            MiningError::Io { .. } => PipelineError::Io(e.to_string()),
            MiningError::Backend(b) => PipelineError::from(b),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<BackendError> for PipelineError {
    fn from(e: BackendError) -> Self {
        match e {
            BackendError::Weights(_) => PipelineError::Io(e.to_string()),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<ModelError> for PipelineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Checkpoint(_) => PipelineError::Io(e.to_string()),
            ModelError::Backend(b) => PipelineError::from(b),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<TrainError> for PipelineError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::CheckpointIo { .. } => PipelineError::Io(e.to_string()),
            TrainError::Model(m) => PipelineError::from(m),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => PipelineError::Io(e.to_string()),
            EvalError::Model(m) => PipelineError::from(m),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

impl From<ConfigError> for PipelineError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => PipelineError::Io(e.to_string()),
            other => PipelineError::Domain(other.to_string()),
        }
    }
}

fn io_err(e: std::io::Error, path: &Path) -> PipelineError {
    PipelineError::Io(format!("{}: {e}", path.display()))
}

/// Lines a stage wants printed; the CLI decides where they go.
#[derive(Debug, Default)]
pub struct StageReport {
    pub lines: Vec<String>,
}

impl StageReport {
    fn push(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    fn extend(&mut self, other: StageReport) {
        self.lines.extend(other.lines);
    }
}

fn workdir(cfg: &PipelineConfig) -> Result<PathBuf, PipelineError> {
    let dir = cfg.paths.workdir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err(e, &dir))?;
    Ok(dir)
}

/// Records the exact configuration (seed included) the artifacts in the
/// workdir were produced with.
fn write_run_meta(cfg: &PipelineConfig, dir: &Path) -> Result<(), PipelineError> {
    #[derive(Serialize)]
    struct RunMeta<'a> {
        seed: u64,
        mode: String,
        config: &'a PipelineConfig,
    }
    let meta = RunMeta { seed: cfg.train.seed, mode: cfg.mode.to_string(), config: cfg };
    let path = dir.join(RUN_META_FILE);
    let body = serde_json::to_string_pretty(&meta).expect("config serializes");
    fs::write(&path, body + "\n").map_err(|e| io_err(e, &path))
}

fn load_schema(cfg: &PipelineConfig) -> Result<AttributeSchema, PipelineError> {
    Ok(load_attribute_schema(&cfg.paths.schema)?)
}

fn load_corpus(cfg: &PipelineConfig, schema: &AttributeSchema) -> Result<ConversationCorpus, PipelineError> {
    Ok(load_conversation_corpus(&cfg.paths.corpus, &schema.attribute)?)
}

/// Backend for the guessing stage.
pub fn load_backend(cfg: &PipelineConfig) -> Result<Box<dyn MlmBackend>, PipelineError> {
    match cfg.backend.kind {
        BackendKind::Mock => {
            let spec = cfg.backend.mock_spec.as_ref().expect("validated");
            let backend = MockBackend::load_spec(spec)?.with_max_content(cfg.backend.max_len);
            Ok(Box::new(backend))
        }
        BackendKind::Real => {
            let dir = cfg.backend.weights_dir.as_ref().expect("validated");
            let backend = BertBackend::load(dir, cfg.backend.max_len, cfg.backend.effective_pooling())?;
            Ok(Box::new(backend))
        }
    }
}

fn build_model(cfg: &PipelineConfig, n_values: usize) -> Result<Box<dyn AttributeModel>, PipelineError> {
    let opt = OptimizerParams::with_lr(cfg.train.lr);
    match cfg.backend.kind {
        BackendKind::Mock => {
            let spec = cfg.backend.mock_spec.as_ref().expect("validated");
            let backend = MockBackend::load_spec(spec)?.with_max_content(cfg.backend.max_len);
            let head = ClassifierHead::new_seeded(n_values, backend_hidden(&backend), cfg.train.seed);
            Ok(Box::new(MockModel::new(backend, head, opt)))
        }
        BackendKind::Real => {
            let dir = cfg.backend.weights_dir.as_ref().expect("validated");
            let model = BertClassifier::build(
                dir,
                cfg.backend.max_len,
                cfg.backend.effective_pooling(),
                n_values,
                cfg.train.seed,
                &opt,
            )?;
            Ok(Box::new(model))
        }
    }
}

fn backend_hidden(b: &MockBackend) -> usize {
    MlmBackend::hidden_size(b)
}

/// Builds `s_doc.jsonl` for the configured mode and prints the coverage
/// summary.
pub fn cmd_build_supervision(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let wiki = load_wiki_collection(&cfg.paths.wiki)?;
    let (s_doc, summary) = build_document_supervision(&schema, &wiki, cfg.mode)?;
    let dir = workdir(cfg)?;
    write_run_meta(cfg, &dir)?;
    let path = dir.join(S_DOC_FILE);
    write_doc_supervision(&s_doc, &path)?;
    let mut report = StageReport::default();
    report.push(format!("mode: {}", cfg.mode));
    for line in summary.to_string().lines() {
        report.push(line);
    }
    report.push(format!("wrote {} entries to {}", s_doc.len(), path.display()));
    Ok(report)
}

/// Mines `s_word.jsonl` and the per-value vocabulary artifacts.
pub fn cmd_guess_words(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let dir = workdir(cfg)?;
    let corpus = if cfg.guess.transductive { Some(load_corpus(cfg, &schema)?) } else { None };
    let s_doc = if cfg.ablation.use_doc_supervision {
        Some(read_doc_supervision(&dir.join(S_DOC_FILE), &schema)?)
    } else {
        None
    };
    let docs = extraction_corpus(corpus.as_ref(), s_doc.as_ref());
    if docs.is_empty() {
        return Err(PipelineError::Domain("nothing to mine: no utterances and no supervision documents".into()));
    }
    let backend = load_backend(cfg)?;
    let params = cfg.guess.mining_params(cfg.backend.masked_guess);
    let (build, word) = mine_word_supervision(&schema, &docs, backend.as_ref(), &params)?;

    write_run_meta(cfg, &dir)?;
    let s_word_path = dir.join(S_WORD_FILE);
    write_word_supervision(&word, &s_word_path)?;
    write_vocabularies(&build.vocabularies, &dir.join(VOCAB_DIR))?;

    let mut report = StageReport::default();
    report.push(format!(
        "built {} attribute vocabularies over {} documents (K={}, M={}, beta={})",
        build.vocabularies.len(),
        docs.len(),
        params.k,
        params.m,
        params.beta
    ));
    if !build.fallback_values.is_empty() {
        report.push(format!("template fallback used for: {}", build.fallback_values.join(", ")));
    }
    if !build.failed_values.is_empty() {
        report.push(format!("no vocabulary for: {}", build.failed_values.join(", ")));
    }
    if !build.discarded_words.is_empty() {
        report.push(format!("cross-vocabulary discards: {}", build.discarded_words.join(", ")));
    }
    report.push(format!("wrote {} word-supervision entries to {}", word.len(), s_word_path.display()));
    if word.is_empty() {
        report.push("warning: no occurrence passed the similarity threshold; s_word.jsonl is empty");
    }
    Ok(report)
}

fn collect_instances(
    cfg: &PipelineConfig,
    schema: &AttributeSchema,
    corpus: &ConversationCorpus,
    dir: &Path,
) -> Result<(Vec<TrainingInstance>, DocTable), PipelineError> {
    let mut instances = Vec::new();
    let mut docs = DocTable::default();
    for user in &corpus.users {
        for (i, utt) in user.utterances.iter().enumerate() {
            docs.insert(format!("utt:{}:{}", user.user_id, i), utt.clone());
        }
    }
    if cfg.ablation.use_doc_supervision {
        let s_doc = read_doc_supervision(&dir.join(S_DOC_FILE), schema)?;
        for entry in &s_doc.entries {
            let doc_id = format!("doc:{}", entry.doc_id);
            docs.insert(doc_id.clone(), entry.text.clone());
            let label = schema.index_of(&entry.label).expect("labels validated");
            instances.push(TrainingInstance::document(doc_id, label));
        }
    }
    if cfg.ablation.use_word_supervision {
        let s_word = read_word_supervision(&dir.join(S_WORD_FILE), schema, cfg.guess.beta)?;
        for entry in &s_word.entries {
            let label = schema.index_of(&entry.label).expect("labels validated");
            instances.push(
                TrainingInstance::word(entry.doc_id.clone(), entry.token_index, label, entry.confidence, cfg.guess.beta)
                    .map_err(PipelineError::from)?,
            );
        }
    }
    Ok((instances, docs))
}

/// Fine-tunes the model on the configured supervision files.
pub fn cmd_train(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let corpus = load_corpus(cfg, &schema)?;
    let dir = workdir(cfg)?;
    let (instances, docs) = collect_instances(cfg, &schema, &corpus, &dir)?;
    if instances.is_empty() {
        return Err(PipelineError::from(TrainError::NoTrainingData));
    }
    let n_docs = instances.iter().filter(|i| i.token_index.is_none()).count();
    let mut model = build_model(cfg, schema.len())?;
    write_run_meta(cfg, &dir)?;
    let ckpt_root = dir.join(CHECKPOINTS_DIR);
    let report_data = fine_tune(
        model.as_mut(),
        &instances,
        &docs,
        &cfg.train,
        cfg.ablation.use_confidence_weight,
        &ckpt_root,
    )?;
    let mut report = StageReport::default();
    report.push(format!(
        "trained on {} instances ({} documents, {} words) for {} epochs",
        instances.len(),
        n_docs,
        instances.len() - n_docs,
        cfg.train.epochs
    ));
    report.push(format!(
        "epoch mean loss: {}",
        report_data.epoch_mean_loss.iter().map(|l| format!("{l:.6}")).collect::<Vec<_>>().join(" -> ")
    ));
    report.push(format!("final checkpoint: {}", report_data.final_checkpoint.display()));
    Ok(report)
}

/// Highest-numbered `checkpoint-<epoch>` directory.
pub fn latest_checkpoint(workdir: &Path) -> Result<PathBuf, PipelineError> {
    let root = workdir.join(CHECKPOINTS_DIR);
    let entries = fs::read_dir(&root).map_err(|e| io_err(e, &root))?;
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(e, &root))?;
        let name = entry.file_name();
        let Some(epoch) = name.to_string_lossy().strip_prefix("checkpoint-").and_then(|n| n.parse::<u64>().ok())
        else {
            continue;
        };
        if best.as_ref().map_or(true, |(b, _)| epoch > *b) {
            best = Some((epoch, entry.path()));
        }
    }
    best.map(|(_, p)| p)
        .ok_or_else(|| PipelineError::Io(format!("no checkpoint found under {}", root.display())))
}

/// Ranks every corpus user with the latest checkpoint.
pub fn cmd_predict(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let corpus = load_corpus(cfg, &schema)?;
    let dir = workdir(cfg)?;
    let ckpt = latest_checkpoint(&dir)?;
    let model = crate::model::load_checkpoint(&ckpt)?;
    if model.num_values() != schema.len() {
        return Err(PipelineError::Domain(format!(
            "checkpoint has {} outputs but the schema has {} values",
            model.num_values(),
            schema.len()
        )));
    }
    let mut predictions = Vec::with_capacity(corpus.users.len());
    for user in &corpus.users {
        predictions.push(rank_attribute_values(user, model.as_ref(), &schema)?);
    }
    validate_permutations(&predictions, &schema)?;
    write_run_meta(cfg, &dir)?;
    let path = dir.join(PREDICTIONS_FILE);
    write_predictions(&predictions, &path)?;
    let mut report = StageReport::default();
    report.push(format!("checkpoint: {}", ckpt.display()));
    report.push(format!("wrote {} rankings to {}", predictions.len(), path.display()));
    Ok(report)
}

/// Scores a predictions file against the gold labels and writes
/// `metrics.json`.
pub fn cmd_evaluate(cfg: &PipelineConfig, predictions_path: Option<&Path>) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let corpus = load_corpus(cfg, &schema)?;
    let gold_path = cfg
        .paths
        .gold
        .as_ref()
        .ok_or_else(|| PipelineError::Domain("paths.gold is not configured".into()))?;
    let gold = load_gold_labels(gold_path, &schema, &corpus)?;
    let dir = workdir(cfg)?;
    let path = predictions_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join(PREDICTIONS_FILE));
    let predictions = read_predictions(&path)?;
    validate_permutations(&predictions, &schema)?;

    let predicted: std::collections::BTreeSet<&str> = predictions.iter().map(|p| p.user_id.as_str()).collect();
    let golded: std::collections::BTreeSet<&str> = gold.entries.keys().map(String::as_str).collect();
    if predicted != golded {
        let missing_gold: Vec<&str> = predicted.difference(&golded).copied().collect();
        let missing_pred: Vec<&str> = golded.difference(&predicted).copied().collect();
        let mut parts = Vec::new();
        if !missing_gold.is_empty() {
            parts.push(format!("predicted users without gold labels: {}", missing_gold.join(", ")));
        }
        if !missing_pred.is_empty() {
            parts.push(format!("gold users without predictions: {}", missing_pred.join(", ")));
        }
        return Err(PipelineError::Domain(parts.join("; ")));
    }

    let report_data = evaluate(&predictions, &gold)?;
    let metrics_path = dir.join(METRICS_FILE);
    write_metrics(&report_data, &metrics_path)?;
    let mut report = StageReport::default();
    report.push(format!("evaluated {} users over {} values", report_data.n_users, report_data.n_values_evaluated));
    report.push(format!("MRR  = {:.6}", report_data.mrr));
    report.push(format!("nDCG = {:.6}", report_data.ndcg));
    report.push(format!("wrote {}", metrics_path.display()));
    Ok(report)
}

/// Ranks every user with BM25 against the supervision documents.
pub fn cmd_baseline_bm25(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let schema = load_schema(cfg)?;
    let corpus = load_corpus(cfg, &schema)?;
    let dir = workdir(cfg)?;
    let s_doc: DocSupervision = read_doc_supervision(&dir.join(S_DOC_FILE), &schema)?;
    if s_doc.entries.is_empty() {
        return Err(PipelineError::Domain("document supervision is empty".into()));
    }
    let mut predictions: Vec<RankedPrediction> = Vec::with_capacity(corpus.users.len());
    for user in &corpus.users {
        predictions.push(bm25_rank(user, &s_doc, &schema, Bm25Params::default())?);
    }
    validate_permutations(&predictions, &schema)?;
    let path = dir.join(BASELINE_PREDICTIONS_FILE);
    write_predictions(&predictions, &path)?;
    let mut report = StageReport::default();
    report.push(format!("wrote {} BM25 rankings to {}", predictions.len(), path.display()));
    Ok(report)
}

/// The full pipeline: supervision, guessing, training, prediction, and
/// (when gold labels are configured) evaluation.
pub fn run_all(cfg: &PipelineConfig) -> Result<StageReport, PipelineError> {
    let mut report = StageReport::default();
    if cfg.ablation.use_doc_supervision {
        report.push("[build-supervision]");
        report.extend(cmd_build_supervision(cfg)?);
    }
    if cfg.ablation.use_word_supervision {
        report.push("[guess-words]");
        report.extend(cmd_guess_words(cfg)?);
    }
    report.push("[train]");
    report.extend(cmd_train(cfg)?);
    report.push("[predict]");
    report.extend(cmd_predict(cfg)?);
    if cfg.paths.gold.is_some() {
        report.push("[evaluate]");
        report.extend(cmd_evaluate(cfg, None)?);
    }
    Ok(report)
}

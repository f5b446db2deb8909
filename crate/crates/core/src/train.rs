//! Confidence-weighted generalized-cross-entropy fine-tuning over mixed
//! document-level and word-level supervision.
//!
//! The objective summed over a batch is `xi(t) * (1 - p_t^q) / q` where
//! `p_t` is the model's probability of the true label and `xi(t)` is 1 for
//! document instances and the stored similarity confidence for word
//! instances. The positive form is used throughout: it is minimized at
//! `p = 1`, recovers cross entropy as `q -> 0`, and equals `1 - p` at
//! `q = 1`.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{split_windows, window_for_token, MlmBackend, Window};
use crate::model::{AttributeModel, EmbeddingTarget, ModelError, PreparedInstance};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("no training data: supervision is empty")]
    NoTrainingData,
    #[error("loss over an empty batch is undefined")]
    EmptyBatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("checkpoint i/o at {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// One term of the generalized cross entropy: `(1 - p^q) / q`.
///
/// Accepts `q` in `(0, 1]`; `q = 1` is the mean-absolute-error endpoint and
/// returns exactly `1 - p`.
pub fn gce_term(p: f64, q: f64) -> Result<f64, TrainError> {
    if !(p > 0.0) {
        return Err(TrainError::Domain(format!("probability must be positive, got {p}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(TrainError::Domain(format!("q must be in (0, 1], got {q}")));
    }
    let p = p.min(1.0);
    if q == 1.0 {
        return Ok(1.0 - p);
    }
    Ok((1.0 - p.powf(q)) / q)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InstanceKind {
    Document,
    Word,
}

/// One supervised training instance. Document instances carry weight 1
/// exactly; word instances carry their stored similarity confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingInstance {
    pub kind: InstanceKind,
    pub doc_id: String,
    /// Global token index of the word occurrence; `None` for documents.
    pub token_index: Option<usize>,
    pub label_index: usize,
    pub weight: f64,
}

impl TrainingInstance {
    pub fn document(doc_id: impl Into<String>, label_index: usize) -> Self {
        Self { kind: InstanceKind::Document, doc_id: doc_id.into(), token_index: None, label_index, weight: 1.0 }
    }

    /// Rejects confidences outside `(beta, 1]`: such word supervision cannot
    /// exist by construction.
    pub fn word(
        doc_id: impl Into<String>,
        token_index: usize,
        label_index: usize,
        confidence: f64,
        beta: f64,
    ) -> Result<Self, TrainError> {
        if !(confidence > beta && confidence <= 1.0) {
            return Err(TrainError::Domain(format!(
                "word confidence {confidence} outside ({beta}, 1]"
            )));
        }
        Ok(Self {
            kind: InstanceKind::Word,
            doc_id: doc_id.into(),
            token_index: Some(token_index),
            label_index,
            weight: confidence,
        })
    }
}

/// The per-instance loss weight: 1 for documents, the stored similarity for
/// words.
pub fn confidence_weight(instance: &TrainingInstance) -> f64 {
    instance.weight
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub q: f64,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { q: 0.4, batch_size: 4, lr: 1e-5, epochs: 3, seed: 42 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(TrainError::Domain(format!("train.q must satisfy 0 < q < 1, got {}", self.q)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Domain("train.batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::Domain(format!("train.lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 {
            return Err(TrainError::Domain("train.epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Resolves word-supervision doc ids back to their texts.
#[derive(Debug, Clone, Default)]
pub struct DocTable {
    texts: HashMap<String, String>,
}

impl DocTable {
    pub fn insert(&mut self, doc_id: impl Into<String>, text: impl Into<String>) {
        self.texts.insert(doc_id.into(), text.into());
    }

    pub fn get(&self, doc_id: &str) -> Option<&str> {
        self.texts.get(doc_id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

/// Resolves instances to encodable windows. Documents take their first
/// window (over-length texts are truncated for training); word instances
/// take the window containing their token. `use_confidence = false` turns
/// every effective weight into 1 (the ablation switch).
pub fn prepare_instances(
    instances: &[TrainingInstance],
    docs: &DocTable,
    backend: &dyn MlmBackend,
    use_confidence: bool,
) -> Result<Vec<PreparedInstance>, TrainError> {
    let mut window_cache: HashMap<&str, Vec<Window>> = HashMap::new();
    let mut prepared = Vec::with_capacity(instances.len());
    for inst in instances {
        let text = docs
            .get(&inst.doc_id)
            .ok_or_else(|| TrainError::Domain(format!("unknown training doc id {:?}", inst.doc_id)))?;
        let windows = window_cache
            .entry(inst.doc_id.as_str())
            .or_insert_with(|| split_windows(&backend.tokenize(text), backend.max_content_len()));
        let (window, target) = match inst.kind {
            InstanceKind::Document => (&windows[0], EmbeddingTarget::Sequence),
            InstanceKind::Word => {
                let idx = inst.token_index.expect("word instance has a token index");
                let (w, local) = window_for_token(windows, idx).ok_or_else(|| {
                    TrainError::Domain(format!("token index {idx} outside document {:?}", inst.doc_id))
                })?;
                (w, EmbeddingTarget::Token(local))
            }
        };
        prepared.push(PreparedInstance {
            window: window.tokens.clone(),
            target,
            label_index: inst.label_index,
            weight: if use_confidence { inst.weight } else { 1.0 },
        });
    }
    Ok(prepared)
}

/// Batch objective: `sum_t weight_t * (1 - p_t^q) / q` with `p_t` the
/// model's probability of the instance's true label.
pub fn cgce_loss(batch: &[PreparedInstance], model: &dyn AttributeModel, q: f64) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let mut total = 0.0;
    for inst in batch {
        let enc = model.backend().encode(&inst.window).map_err(ModelError::Backend)?;
        let h = match inst.target {
            EmbeddingTarget::Sequence => &enc.sequence_vector,
            EmbeddingTarget::Token(i) => &enc.token_vectors[i],
        };
        let probs = model.value_probs(h)?;
        let p = probs[inst.label_index];
        total += inst.weight * gce_term(p, q)?;
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
    pub epoch_mean_loss: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

fn ckpt_io(path: &Path) -> impl Fn(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::CheckpointIo { path: path.display().to_string(), source: e }
}

fn write_train_log(dir: &Path, steps: &[StepLoss]) -> Result<(), TrainError> {
    let path = dir.join(TRAIN_LOG_FILE);
    let file = File::create(&path).map_err(ckpt_io(&path))?;
    let mut w = BufWriter::new(file);
    for s in steps {
        let line = serde_json::to_string(s).expect("step serializes");
        writeln!(w, "{line}").map_err(ckpt_io(&path))?;
    }
    w.flush().map_err(ckpt_io(&path))
}

/// Mini-batch fine-tuning over a shuffled mix of document and word
/// instances. One checkpoint directory is written per epoch
/// (`checkpoint-<epoch>/`, write-temp-then-rename) containing the model
/// weights and the cumulative step-loss log. Deterministic given the seed
/// and backend.
pub fn fine_tune(
    model: &mut dyn AttributeModel,
    instances: &[TrainingInstance],
    docs: &DocTable,
    config: &TrainConfig,
    use_confidence: bool,
    checkpoint_root: &Path,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let prepared = prepare_instances(instances, docs, model.backend(), use_confidence)?;
    if prepared.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    fs::create_dir_all(checkpoint_root).map_err(ckpt_io(checkpoint_root))?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut steps: Vec<StepLoss> = Vec::new();
    let mut epoch_mean_loss = Vec::with_capacity(config.epochs);
    let mut checkpoints = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut global_step = 0usize;

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PreparedInstance> = chunk.iter().map(|&i| prepared[i].clone()).collect();
            global_step += 1;
            let loss = model.train_step(&batch, config.q)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: global_step });
            }
            steps.push(StepLoss { step: global_step, loss });
            epoch_loss += loss;
            epoch_batches += 1;
        }
        epoch_mean_loss.push(epoch_loss / epoch_batches as f64);

        let final_dir = checkpoint_root.join(format!("checkpoint-{epoch}"));
        let tmp_dir = checkpoint_root.join(format!(".tmp-checkpoint-{epoch}"));
        if tmp_dir.exists() {
            fs::remove_dir_all(&tmp_dir).map_err(ckpt_io(&tmp_dir))?;
        }
        fs::create_dir_all(&tmp_dir).map_err(ckpt_io(&tmp_dir))?;
        model.save(&tmp_dir)?;
        write_train_log(&tmp_dir, &steps)?;
        if final_dir.exists() {
            fs::remove_dir_all(&final_dir).map_err(ckpt_io(&final_dir))?;
        }
        fs::rename(&tmp_dir, &final_dir).map_err(ckpt_io(&final_dir))?;
        checkpoints.push(final_dir);
    }

    let final_checkpoint = checkpoints.last().expect("at least one epoch").clone();
    Ok(TrainReport { steps, epoch_mean_loss, checkpoints, final_checkpoint })
}

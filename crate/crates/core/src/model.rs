//! Classification models: an encoder backend paired with a linear head over
//! the attribute values, plus the per-batch training step. [`MockModel`]
//! trains the mock backend with hand-derived analytic gradients;
//! `backend::bert::BertClassifier` trains the pre-trained backend through
//! autodiff. Both present the same [`AttributeModel`] surface.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::mock::{MockBackend, UNK_ID};
use crate::backend::{BackendError, MlmBackend, TokenizedText};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("label index {label} out of range for {n_values} values")]
    InvalidLabel { label: usize, n_values: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("model failure: {0}")]
    Internal(String),
}

impl From<candle_core::Error> for ModelError {
    fn from(e: candle_core::Error) -> Self {
        ModelError::Internal(e.to_string())
    }
}

/// Linear map from the encoder dimension to the attribute values. Row order
/// follows the schema's value order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl ClassifierHead {
    /// Small seeded random weights, zero bias.
    pub fn new_seeded(n_values: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..n_values)
            .map(|_| (0..hidden).map(|_| rng.gen_range(-0.02..0.02)).collect())
            .collect();
        Self { weights, bias: vec![0.0; n_values] }
    }

    pub fn zeros(n_values: usize, hidden: usize) -> Self {
        Self { weights: vec![vec![0.0; hidden]; n_values], bias: vec![0.0; n_values] }
    }

    pub fn n_values(&self) -> usize {
        self.weights.len()
    }

    pub fn hidden(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }
}

/// Logits over the attribute values for one embedding.
pub fn classify(embedding: &[f64], head: &ClassifierHead) -> Result<Vec<f64>, BackendError> {
    if embedding.len() != head.hidden() {
        return Err(BackendError::DimensionMismatch { got: embedding.len(), want: head.hidden() });
    }
    Ok(head
        .weights
        .iter()
        .zip(&head.bias)
        .map(|(row, b)| row.iter().zip(embedding).map(|(w, x)| w * x).sum::<f64>() + b)
        .collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    crate::backend::softmax_inplace(&mut out);
    out
}

/// Which vector of an encoded window feeds the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingTarget {
    /// The sequence-level vector (document instances).
    Sequence,
    /// A token vector, by index local to the window (word instances).
    Token(usize),
}

/// A training instance resolved to an encodable window. `weight` is the
/// effective loss weight after any ablation switches.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInstance {
    pub window: TokenizedText,
    pub target: EmbeddingTarget,
    pub label_index: usize,
    pub weight: f64,
}

pub trait AttributeModel {
    fn backend(&self) -> &dyn MlmBackend;

    fn num_values(&self) -> usize;

    /// Softmax of the head logits for one embedding.
    fn value_probs(&self, embedding: &[f64]) -> Result<Vec<f64>, ModelError>;

    /// Head logits for a window's sequence-level vector.
    fn window_logits(&self, window: &TokenizedText) -> Result<Vec<f64>, ModelError>;

    /// One optimizer step on the weighted generalized-cross-entropy
    /// objective; returns the batch loss before the update.
    fn train_step(&mut self, batch: &[PreparedInstance], q: f64) -> Result<f64, ModelError>;

    /// Writes the checkpoint files into `dir` (which must exist).
    fn save(&self, dir: &Path) -> Result<(), ModelError>;
}

/// Checkpoint dispatch record, written next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub kind: String,
    pub n_values: usize,
}

pub const MODEL_META_FILE: &str = "model_meta.json";

pub fn write_meta(dir: &Path, meta: &ModelMeta) -> Result<(), ModelError> {
    let path = dir.join(MODEL_META_FILE);
    let file = File::create(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::to_writer_pretty(BufWriter::new(file), meta)
        .map_err(|e| ModelError::Checkpoint(e.to_string()))
}

pub fn read_meta(dir: &Path) -> Result<ModelMeta, ModelError> {
    let path = dir.join(MODEL_META_FILE);
    let file = File::open(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| ModelError::Checkpoint(e.to_string()))
}

// ---------------------------------------------------------------------------
// AdamW in f64 for the mock model

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone, Default)]
struct AdamSlot {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamSlot {
    fn sized(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn update(&mut self, params: &OptimizerParams, step: usize, x: &mut [f64], g: &[f64]) {
        let bc1 = 1.0 - params.beta1.powi(step as i32);
        let bc2 = 1.0 - params.beta2.powi(step as i32);
        for i in 0..x.len() {
            self.m[i] = params.beta1 * self.m[i] + (1.0 - params.beta1) * g[i];
            self.v[i] = params.beta2 * self.v[i] + (1.0 - params.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            x[i] -= params.lr * (m_hat / (v_hat.sqrt() + params.eps) + params.weight_decay * x[i]);
        }
    }
}

// ---------------------------------------------------------------------------
// Mock model

/// Gradients of the batch objective with respect to the mock model's
/// parameters.
#[derive(Debug, Clone)]
pub struct MockGradients {
    pub head_weights: Vec<Vec<f64>>,
    pub head_bias: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct MockCheckpoint {
    spec: crate::backend::mock::MockSpec,
    head: ClassifierHead,
    optimizer: OptimizerParams,
}

pub struct MockModel {
    backend: MockBackend,
    head: ClassifierHead,
    opt: OptimizerParams,
    step: usize,
    slot_w: AdamSlot,
    slot_b: AdamSlot,
    slot_e: AdamSlot,
}

impl MockModel {
    pub fn new(backend: MockBackend, head: ClassifierHead, opt: OptimizerParams) -> Self {
        let hidden = backend.hidden_size();
        let n_values = head.n_values();
        let vocab = backend.vocab_size();
        Self {
            backend,
            head,
            opt,
            step: 0,
            slot_w: AdamSlot::sized(n_values * hidden),
            slot_b: AdamSlot::sized(n_values),
            slot_e: AdamSlot::sized(vocab * hidden),
        }
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut ClassifierHead {
        &mut self.head
    }

    fn target_embedding(&self, inst: &PreparedInstance) -> Result<Vec<f64>, ModelError> {
        let enc = self.backend.encode(&inst.window)?;
        match inst.target {
            EmbeddingTarget::Sequence => Ok(enc.sequence_vector),
            EmbeddingTarget::Token(i) => enc
                .token_vectors
                .get(i)
                .cloned()
                .ok_or_else(|| ModelError::Internal(format!("token index {i} outside window"))),
        }
    }

    /// Analytic gradients of `sum_t weight_t * (1 - p_t^q)/q` over the batch.
    pub fn gradients(&self, batch: &[PreparedInstance], q: f64) -> Result<(f64, MockGradients), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let hidden = self.backend.hidden_size();
        let n_values = self.head.n_values();
        let mut grads = MockGradients {
            head_weights: vec![vec![0.0; hidden]; n_values],
            head_bias: vec![0.0; n_values],
            embeddings: vec![vec![0.0; hidden]; self.backend.vocab_size()],
        };
        let mut loss = 0.0;
        for inst in batch {
            if inst.label_index >= n_values {
                return Err(ModelError::InvalidLabel { label: inst.label_index, n_values });
            }
            let h = self.target_embedding(inst)?;
            let probs = softmax(&classify(&h, &self.head)?);
            let p_y = probs[inst.label_index];
            loss += inst.weight * (1.0 - p_y.powf(q)) / q;
            // d/dz_k of w*(1-p_y^q)/q is w * p_y^q * (p_k - [k==y]).
            let scale = inst.weight * p_y.powf(q);
            let mut d_h = vec![0.0; hidden];
            for k in 0..n_values {
                let dz = scale * (probs[k] - if k == inst.label_index { 1.0 } else { 0.0 });
                grads.head_bias[k] += dz;
                for j in 0..hidden {
                    grads.head_weights[k][j] += dz * h[j];
                    d_h[j] += dz * self.head.weights[k][j];
                }
            }
            self.backpropagate_encoder(inst, &d_h, &mut grads.embeddings);
        }
        Ok((loss, grads))
    }

    /// Pushes d_loss/d_h through the mock encoder into the embedding table.
    fn backpropagate_encoder(&self, inst: &PreparedInstance, d_h: &[f64], d_emb: &mut [Vec<f64>]) {
        let ids = &inst.window.token_ids;
        let n = ids.len();
        if n == 0 {
            return;
        }
        let alpha = self.backend.alpha();
        let mut add = |id: u32, scale: f64, grad: &[f64]| {
            if id == UNK_ID {
                return;
            }
            let row = &mut d_emb[id as usize];
            for (r, g) in row.iter_mut().zip(grad) {
                *r += scale * g;
            }
        };
        let token_grad = |i: usize, scale: f64, grad: &[f64], add: &mut dyn FnMut(u32, f64, &[f64])| {
            add(ids[i], scale, grad);
            let neighbors: Vec<usize> =
                [i.checked_sub(1), (i + 1 < n).then_some(i + 1)].into_iter().flatten().collect();
            if !neighbors.is_empty() {
                let s = scale * alpha / neighbors.len() as f64;
                for &j in &neighbors {
                    add(ids[j], s, grad);
                }
            }
        };
        match inst.target {
            EmbeddingTarget::Token(i) => token_grad(i, 1.0, d_h, &mut add),
            EmbeddingTarget::Sequence => {
                let scale = 1.0 / n as f64;
                for i in 0..n {
                    token_grad(i, scale, d_h, &mut add);
                }
            }
        }
    }
}

impl AttributeModel for MockModel {
    fn backend(&self) -> &dyn MlmBackend {
        &self.backend
    }

    fn num_values(&self) -> usize {
        self.head.n_values()
    }

    fn value_probs(&self, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        Ok(softmax(&classify(embedding, &self.head)?))
    }

    fn window_logits(&self, window: &TokenizedText) -> Result<Vec<f64>, ModelError> {
        let enc = self.backend.encode(window)?;
        Ok(classify(&enc.sequence_vector, &self.head)?)
    }

    fn train_step(&mut self, batch: &[PreparedInstance], q: f64) -> Result<f64, ModelError> {
        let (loss, grads) = self.gradients(batch, q)?;
        self.step += 1;
        let hidden = self.backend.hidden_size();
        let flat_w: Vec<f64> = grads.head_weights.iter().flatten().copied().collect();
        let mut w: Vec<f64> = self.head.weights.iter().flatten().copied().collect();
        self.slot_w.update(&self.opt, self.step, &mut w, &flat_w);
        for (k, row) in self.head.weights.iter_mut().enumerate() {
            row.copy_from_slice(&w[k * hidden..(k + 1) * hidden]);
        }
        self.slot_b.update(&self.opt, self.step, &mut self.head.bias, &grads.head_bias);
        let flat_e: Vec<f64> = grads.embeddings.iter().flatten().copied().collect();
        let table = self.backend.embeddings_mut();
        let mut e: Vec<f64> = table.iter().flatten().copied().collect();
        self.slot_e.update(&self.opt, self.step, &mut e, &flat_e);
        for (i, row) in table.iter_mut().enumerate() {
            row.copy_from_slice(&e[i * hidden..(i + 1) * hidden]);
        }
        Ok(loss)
    }

    fn save(&self, dir: &Path) -> Result<(), ModelError> {
        write_meta(dir, &ModelMeta { kind: "mock".into(), n_values: self.head.n_values() })?;
        let path = dir.join("mock_model.json");
        let file = File::create(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt = MockCheckpoint {
            spec: self.backend.to_spec(),
            head: self.head.clone(),
            optimizer: self.opt.clone(),
        };
        serde_json::to_writer(BufWriter::new(file), &ckpt).map_err(|e| ModelError::Checkpoint(e.to_string()))
    }
}

impl MockModel {
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let path = dir.join("mock_model.json");
        let file = File::open(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: MockCheckpoint =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let backend = MockBackend::from_spec(ckpt.spec)?;
        Ok(Self::new(backend, ckpt.head, ckpt.optimizer))
    }
}

/// Loads whichever model kind the checkpoint directory holds.
pub fn load_checkpoint(dir: &Path) -> Result<Box<dyn AttributeModel>, ModelError> {
    let meta = read_meta(dir)?;
    match meta.kind.as_str() {
        "mock" => Ok(Box::new(MockModel::load(dir)?)),
        "real" => Ok(Box::new(crate::backend::bert::BertClassifier::load(dir)?)),
        other => Err(ModelError::Checkpoint(format!("unknown model kind {other:?}"))),
    }
}

//! Pre-trained transformer backend. Loads a base-size uncased BERT-style
//! model from a local directory (`config.json`, `vocab.txt`,
//! `model.safetensors` with the usual parameter names) — no network access
//! at run time. The same graph serves inference ([`BertBackend`]) and
//! fine-tuning ([`BertClassifier`]), with gradients flowing through the
//! whole encoder via autodiff.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, IndexOp, Tensor, D};
use candle_nn::{embedding, layer_norm, linear, Embedding, LayerNorm, Linear, Module, Optimizer, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::wordpiece::WordPieceTokenizer;
use super::{BackendError, ContextEmbeddings, MlmBackend, Pooling, TokenizedText, VocabDistribution};
use crate::model::{AttributeModel, EmbeddingTarget, ModelError, OptimizerParams, PreparedInstance};

pub const CONFIG_FILE: &str = "config.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const WEIGHTS_FILE: &str = "model.safetensors";
const CLASSIFIER_META_FILE: &str = "classifier_meta.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BertConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_hidden_layers: usize,
    pub num_attention_heads: usize,
    pub intermediate_size: usize,
    pub max_position_embeddings: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
}

fn default_type_vocab() -> usize {
    2
}

fn default_eps() -> f64 {
    1e-12
}

struct Embeddings {
    word: Embedding,
    position: Embedding,
    token_type: Embedding,
    norm: LayerNorm,
}

struct AttentionBlock {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    output_norm: LayerNorm,
    n_heads: usize,
    head_dim: usize,
}

struct EncoderLayer {
    attention: AttentionBlock,
    intermediate: Linear,
    output: Linear,
    output_norm: LayerNorm,
}

struct MlmHead {
    dense: Linear,
    norm: LayerNorm,
    /// Decoder weights are tied to the word embeddings; only the bias is a
    /// separate parameter.
    bias: Tensor,
}

/// The encoder graph plus the MLM head, all parameters tracked in one
/// var map so they stay trainable.
pub struct BertCore {
    config: BertConfig,
    embeddings: Embeddings,
    layers: Vec<EncoderLayer>,
    mlm: MlmHead,
    device: Device,
}

impl BertCore {
    fn build(vb: &VarBuilder, config: &BertConfig, device: &Device) -> Result<Self, BackendError> {
        let h = config.hidden_size;
        let eb = vb.pp("bert").pp("embeddings");
        let embeddings = Embeddings {
            word: embedding(config.vocab_size, h, eb.pp("word_embeddings"))?,
            position: embedding(config.max_position_embeddings, h, eb.pp("position_embeddings"))?,
            token_type: embedding(config.type_vocab_size, h, eb.pp("token_type_embeddings"))?,
            norm: layer_norm(h, config.layer_norm_eps, eb.pp("LayerNorm"))?,
        };
        let mut layers = Vec::with_capacity(config.num_hidden_layers);
        for i in 0..config.num_hidden_layers {
            let lb = vb.pp("bert").pp("encoder").pp("layer").pp(i.to_string());
            let attention = AttentionBlock {
                query: linear(h, h, lb.pp("attention").pp("self").pp("query"))?,
                key: linear(h, h, lb.pp("attention").pp("self").pp("key"))?,
                value: linear(h, h, lb.pp("attention").pp("self").pp("value"))?,
                output: linear(h, h, lb.pp("attention").pp("output").pp("dense"))?,
                output_norm: layer_norm(h, config.layer_norm_eps, lb.pp("attention").pp("output").pp("LayerNorm"))?,
                n_heads: config.num_attention_heads,
                head_dim: h / config.num_attention_heads,
            };
            layers.push(EncoderLayer {
                attention,
                intermediate: linear(h, config.intermediate_size, lb.pp("intermediate").pp("dense"))?,
                output: linear(config.intermediate_size, h, lb.pp("output").pp("dense"))?,
                output_norm: layer_norm(h, config.layer_norm_eps, lb.pp("output").pp("LayerNorm"))?,
            });
        }
        let cb = vb.pp("cls").pp("predictions");
        let mlm = MlmHead {
            dense: linear(h, h, cb.pp("transform").pp("dense"))?,
            norm: layer_norm(h, config.layer_norm_eps, cb.pp("transform").pp("LayerNorm"))?,
            bias: cb.get(config.vocab_size, "bias")?,
        };
        Ok(Self { config: config.clone(), embeddings, layers, mlm, device: device.clone() })
    }

    /// Hidden states for padded id rows with an attention mask; shapes
    /// `[batch, seq]` in, `[batch, seq, hidden]` out.
    fn forward(&self, ids: &Tensor, attention_mask: &Tensor) -> Result<Tensor, BackendError> {
        let (batch, seq) = ids.dims2()?;
        let positions = Tensor::arange(0u32, seq as u32, &self.device)?;
        let types = Tensor::zeros((batch, seq), DType::U32, &self.device)?;
        let mut hidden = self
            .embeddings
            .word
            .forward(ids)?
            .broadcast_add(&self.embeddings.position.forward(&positions)?)?
            .add(&self.embeddings.token_type.forward(&types)?)?;
        hidden = self.embeddings.norm.forward(&hidden)?;

        // Additive mask: 0 where attended, a large negative where padded.
        let neg = attention_mask
            .to_dtype(DType::F32)?
            .affine(-1e4, 1e4)?
            .reshape((batch, 1, 1, seq))?;

        for layer in &self.layers {
            let att = &layer.attention;
            let shape = (batch, seq, att.n_heads, att.head_dim);
            let q = att.query.forward(&hidden)?.reshape(shape)?.transpose(1, 2)?.contiguous()?;
            let k = att.key.forward(&hidden)?.reshape(shape)?.transpose(1, 2)?.contiguous()?;
            let v = att.value.forward(&hidden)?.reshape(shape)?.transpose(1, 2)?.contiguous()?;
            let scale = 1.0 / (att.head_dim as f64).sqrt();
            let scores = (q.matmul(&k.transpose(2, 3)?)? * scale)?.broadcast_add(&neg)?;
            let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
            let context = probs
                .matmul(&v)?
                .transpose(1, 2)?
                .reshape((batch, seq, att.n_heads * att.head_dim))?;
            let att_out = att.output.forward(&context)?;
            hidden = att.output_norm.forward(&hidden.add(&att_out)?)?;
            let inter = layer.intermediate.forward(&hidden)?.gelu_erf()?;
            let ffn = layer.output.forward(&inter)?;
            hidden = layer.output_norm.forward(&hidden.add(&ffn)?)?;
        }
        Ok(hidden)
    }

    /// MLM-head logits over the vocabulary for embedding rows `[n, hidden]`.
    fn mlm_logits(&self, embeddings: &Tensor) -> Result<Tensor, BackendError> {
        let x = self.mlm.dense.forward(embeddings)?.gelu_erf()?;
        let x = self.mlm.norm.forward(&x)?;
        let decoder = self.embeddings.word.embeddings();
        Ok(x.matmul(&decoder.t()?)?.broadcast_add(&self.mlm.bias)?)
    }
}

/// Every parameter name the core registers must resolve to a tensor in the
/// weights file, possibly through one of the conventional aliases.
fn load_weights_with_aliases(varmap: &VarMap, path: &Path, device: &Device) -> Result<(), BackendError> {
    let tensors = candle_core::safetensors::load(path, device)
        .map_err(|e| BackendError::Weights(format!("{}: {e}", path.display())))?;
    let data = varmap.data().lock().expect("varmap lock");
    for (name, var) in data.iter() {
        let mut candidates: Vec<String> = vec![name.clone()];
        if let Some(stripped) = name.strip_prefix("bert.") {
            candidates.push(stripped.to_owned());
        }
        if let Some(base) = name.strip_suffix(".weight") {
            if base.ends_with("LayerNorm") {
                candidates.push(format!("{base}.gamma"));
            }
        }
        if let Some(base) = name.strip_suffix(".bias") {
            if base.ends_with("LayerNorm") {
                candidates.push(format!("{base}.beta"));
            }
        }
        if name == "cls.predictions.bias" {
            candidates.push("cls.predictions.decoder.bias".to_owned());
        }
        let found = candidates.iter().find_map(|c| tensors.get(c.as_str())).ok_or_else(|| {
            BackendError::Weights(format!("{} is missing tensor {name}", path.display()))
        })?;
        let found = found
            .to_dtype(DType::F32)
            .and_then(|t| t.to_device(device))
            .map_err(|e| BackendError::Weights(format!("tensor {name}: {e}")))?;
        var.set(&found).map_err(|e| BackendError::Weights(format!("tensor {name}: {e}")))?;
    }
    Ok(())
}

fn read_config(dir: &Path) -> Result<BertConfig, BackendError> {
    let path = dir.join(CONFIG_FILE);
    let file = File::open(&path).map_err(|e| BackendError::Weights(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| BackendError::Weights(format!("{}: {e}", path.display())))
}

/// Inference view over the pre-trained model.
pub struct BertBackend {
    core: BertCore,
    tokenizer: WordPieceTokenizer,
    varmap: VarMap,
    device: Device,
    max_content: usize,
    pooling: Pooling,
}

impl BertBackend {
    /// Loads from a local weights directory. `max_len` counts the two
    /// special positions a window gains when encoded.
    pub fn load(weights_dir: &Path, max_len: usize, pooling: Pooling) -> Result<Self, BackendError> {
        let config = read_config(weights_dir)?;
        if max_len < 3 {
            return Err(BackendError::Weights("backend.max_len must be at least 3".into()));
        }
        if max_len > config.max_position_embeddings {
            return Err(BackendError::Weights(format!(
                "backend.max_len {max_len} exceeds the model's {} positions",
                config.max_position_embeddings
            )));
        }
        let tokenizer = WordPieceTokenizer::from_vocab_file(&weights_dir.join(VOCAB_FILE), true)?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(BackendError::Weights(format!(
                "vocab.txt has {} entries but config.json declares {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let device = Device::Cpu;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, DType::F32, &device);
        let core = BertCore::build(&vb, &config, &device)?;
        load_weights_with_aliases(&varmap, &weights_dir.join(WEIGHTS_FILE), &device)?;
        Ok(Self { core, tokenizer, varmap, device, max_content: max_len - 2, pooling })
    }

    fn wrap_window(&self, tokens: &TokenizedText) -> Vec<u32> {
        let mut ids = Vec::with_capacity(tokens.len() + 2);
        ids.push(self.tokenizer.cls_id());
        ids.extend_from_slice(&tokens.token_ids);
        ids.push(self.tokenizer.sep_id());
        ids
    }

    /// Hidden states for one wrapped window: `[seq, hidden]`.
    fn forward_single(&self, ids: &[u32]) -> Result<Tensor, BackendError> {
        let seq = ids.len();
        let input = Tensor::from_vec(ids.to_vec(), (1, seq), &self.device)?;
        let mask = Tensor::ones((1, seq), DType::F32, &self.device)?;
        Ok(self.core.forward(&input, &mask)?.i(0)?)
    }

    fn rows_to_f64(t: &Tensor) -> Result<Vec<Vec<f64>>, BackendError> {
        Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
    }
}

impl MlmBackend for BertBackend {
    fn tokenize(&self, text: &str) -> TokenizedText {
        self.tokenizer.tokenize(text)
    }

    fn encode(&self, tokens: &TokenizedText) -> Result<ContextEmbeddings, BackendError> {
        if tokens.len() > self.max_content {
            return Err(BackendError::SequenceTooLong { len: tokens.len(), max: self.max_content });
        }
        let hidden = self.forward_single(&self.wrap_window(tokens))?;
        let rows = Self::rows_to_f64(&hidden)?;
        let n = tokens.len();
        let token_vectors: Vec<Vec<f64>> = rows[1..=n].to_vec();
        let sequence_vector = match self.pooling {
            Pooling::Cls => rows[0].clone(),
            Pooling::Mean if n > 0 => {
                let mut mean = vec![0.0; self.core.config.hidden_size];
                for row in &token_vectors {
                    for (m, x) in mean.iter_mut().zip(row) {
                        *m += x;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                mean
            }
            Pooling::Mean => rows[0].clone(),
        };
        Ok(ContextEmbeddings { token_vectors, sequence_vector })
    }

    fn mlm_distribution(&self, embedding: &[f64]) -> Result<VocabDistribution, BackendError> {
        let h = self.core.config.hidden_size;
        if embedding.len() != h {
            return Err(BackendError::DimensionMismatch { got: embedding.len(), want: h });
        }
        let x = Tensor::from_vec(embedding.iter().map(|&v| v as f32).collect::<Vec<f32>>(), (1, h), &self.device)?;
        let logits = self.core.mlm_logits(&x)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        Ok(VocabDistribution { probs: probs.i(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()? })
    }

    fn hidden_size(&self) -> usize {
        self.core.config.hidden_size
    }

    fn max_content_len(&self) -> usize {
        self.max_content
    }

    fn vocab_size(&self) -> usize {
        self.tokenizer.vocab_size()
    }

    fn vocab_word(&self, id: u32) -> Option<&str> {
        if self.tokenizer.is_special_or_nonword(id) {
            None
        } else {
            self.tokenizer.token(id)
        }
    }

    fn mask_token_id(&self) -> Option<u32> {
        self.tokenizer.mask_id()
    }
}

#[derive(Serialize, Deserialize)]
struct ClassifierMeta {
    pooling: Pooling,
    max_len: usize,
    optimizer: OptimizerParams,
}

/// The fine-tunable model: pre-trained encoder plus a linear value head.
pub struct BertClassifier {
    backend: BertBackend,
    head_varmap: VarMap,
    head: Linear,
    n_values: usize,
    optimizer: RefCell<candle_nn::AdamW>,
    opt_params: OptimizerParams,
    max_len: usize,
}

impl BertClassifier {
    /// Fresh head over a pre-trained weights directory. The head weights are
    /// seeded small uniform, zero bias.
    pub fn build(
        weights_dir: &Path,
        max_len: usize,
        pooling: Pooling,
        n_values: usize,
        seed: u64,
        opt: &OptimizerParams,
    ) -> Result<Self, ModelError> {
        let backend = BertBackend::load(weights_dir, max_len, pooling)?;
        Self::with_backend(backend, n_values, Some(seed), opt, max_len)
    }

    fn with_backend(
        backend: BertBackend,
        n_values: usize,
        head_seed: Option<u64>,
        opt: &OptimizerParams,
        max_len: usize,
    ) -> Result<Self, ModelError> {
        if n_values == 0 {
            return Err(ModelError::Internal("classifier needs at least one value".into()));
        }
        let hidden = backend.hidden_size();
        let head_varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&head_varmap, DType::F32, &backend.device);
        let head = linear(hidden, n_values, vb.pp("classifier"))?;
        if let Some(seed) = head_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w: Vec<f32> = (0..n_values * hidden).map(|_| rng.gen_range(-0.02f32..0.02)).collect();
            let data = head_varmap.data().lock().expect("varmap lock");
            data["classifier.weight"].set(&Tensor::from_vec(w, (n_values, hidden), &backend.device)?)?;
            data["classifier.bias"].set(&Tensor::zeros(n_values, DType::F32, &backend.device)?)?;
        }
        let mut vars = backend.varmap.all_vars();
        vars.extend(head_varmap.all_vars());
        let optimizer = candle_nn::AdamW::new(
            vars,
            candle_nn::ParamsAdamW {
                lr: opt.lr,
                beta1: opt.beta1,
                beta2: opt.beta2,
                eps: opt.eps,
                weight_decay: opt.weight_decay,
            },
        )?;
        Ok(Self {
            backend,
            head_varmap,
            head,
            n_values,
            optimizer: RefCell::new(optimizer),
            opt_params: opt.clone(),
            max_len,
        })
    }

    /// Reopens a checkpoint directory written by [`AttributeModel::save`].
    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let meta = crate::model::read_meta(dir)?;
        let path = dir.join(CLASSIFIER_META_FILE);
        let file = File::open(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        let cmeta: ClassifierMeta =
            serde_json::from_reader(BufReader::new(file)).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let backend = BertBackend::load(dir, cmeta.max_len, cmeta.pooling)?;
        let model = Self::with_backend(backend, meta.n_values, None, &cmeta.optimizer, cmeta.max_len)?;
        load_weights_with_aliases(&model.head_varmap, &dir.join(WEIGHTS_FILE), &model.backend.device)?;
        Ok(model)
    }

    /// Sequence-level vector of one window, per the configured pooling.
    fn pooled(&self, hidden: &Tensor, content_len: usize) -> Result<Tensor, ModelError> {
        match self.backend.pooling {
            Pooling::Cls => Ok(hidden.i(0)?),
            Pooling::Mean if content_len > 0 => {
                Ok(hidden.narrow(0, 1, content_len)?.mean(0)?)
            }
            Pooling::Mean => Ok(hidden.i(0)?),
        }
    }
}

impl AttributeModel for BertClassifier {
    fn backend(&self) -> &dyn MlmBackend {
        &self.backend
    }

    fn num_values(&self) -> usize {
        self.n_values
    }

    fn value_probs(&self, embedding: &[f64]) -> Result<Vec<f64>, ModelError> {
        let h = self.backend.hidden_size();
        if embedding.len() != h {
            return Err(ModelError::Backend(BackendError::DimensionMismatch { got: embedding.len(), want: h }));
        }
        let x = Tensor::from_vec(
            embedding.iter().map(|&v| v as f32).collect::<Vec<f32>>(),
            (1, h),
            &self.backend.device,
        )?;
        let probs = candle_nn::ops::softmax(&self.head.forward(&x)?, D::Minus1)?;
        Ok(probs.i(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    fn window_logits(&self, window: &TokenizedText) -> Result<Vec<f64>, ModelError> {
        if window.len() > self.backend.max_content {
            return Err(ModelError::Backend(BackendError::SequenceTooLong {
                len: window.len(),
                max: self.backend.max_content,
            }));
        }
        let hidden = self.backend.forward_single(&self.backend.wrap_window(window))?;
        let pooled = self.pooled(&hidden, window.len())?;
        let logits = self.head.forward(&pooled.unsqueeze(0)?)?;
        Ok(logits.i(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }

    fn train_step(&mut self, batch: &[PreparedInstance], q: f64) -> Result<f64, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let device = self.backend.device.clone();
        let pad = self.backend.tokenizer.pad_id();
        let wrapped: Vec<Vec<u32>> = batch.iter().map(|b| self.backend.wrap_window(&b.window)).collect();
        let seq = wrapped.iter().map(Vec::len).max().expect("non-empty batch");
        let mut ids = Vec::with_capacity(batch.len() * seq);
        let mut mask = Vec::with_capacity(batch.len() * seq);
        for row in &wrapped {
            ids.extend_from_slice(row);
            ids.extend(std::iter::repeat(pad).take(seq - row.len()));
            mask.extend(std::iter::repeat(1f32).take(row.len()));
            mask.extend(std::iter::repeat(0f32).take(seq - row.len()));
        }
        let ids = Tensor::from_vec(ids, (batch.len(), seq), &device)?;
        let mask = Tensor::from_vec(mask, (batch.len(), seq), &device)?;
        let hidden = self.backend.core.forward(&ids, &mask)?;

        let mut targets = Vec::with_capacity(batch.len());
        for (bi, inst) in batch.iter().enumerate() {
            if inst.label_index >= self.n_values {
                return Err(ModelError::InvalidLabel { label: inst.label_index, n_values: self.n_values });
            }
            let row = hidden.i(bi)?;
            let vector = match inst.target {
                EmbeddingTarget::Sequence => self.pooled(&row, inst.window.len())?,
                EmbeddingTarget::Token(local) => {
                    if local >= inst.window.len() {
                        return Err(ModelError::Internal(format!("token index {local} outside window")));
                    }
                    row.i(local + 1)?
                }
            };
            targets.push(vector);
        }
        let targets = Tensor::stack(&targets, 0)?;
        let logits = self.head.forward(&targets)?;
        let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
        let labels = Tensor::from_vec(
            batch.iter().map(|b| b.label_index as u32).collect::<Vec<u32>>(),
            (batch.len(), 1),
            &device,
        )?;
        let p_true = probs.gather(&labels, 1)?.squeeze(1)?;
        let weights = Tensor::from_vec(
            batch.iter().map(|b| b.weight as f32).collect::<Vec<f32>>(),
            batch.len(),
            &device,
        )?;
        let terms = (((p_true.powf(q)? * (-1.0))? + 1.0)? / q)?;
        let loss = terms.mul(&weights)?.sum_all()?;
        let loss_value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        self.optimizer.borrow_mut().backward_step(&loss)?;
        Ok(loss_value)
    }

    fn save(&self, dir: &Path) -> Result<(), ModelError> {
        crate::model::write_meta(dir, &crate::model::ModelMeta { kind: "real".into(), n_values: self.n_values })?;
        let meta = ClassifierMeta {
            pooling: self.backend.pooling,
            max_len: self.max_len,
            optimizer: self.opt_params.clone(),
        };
        let path = dir.join(CLASSIFIER_META_FILE);
        let file = File::create(&path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        serde_json::to_writer_pretty(BufWriter::new(file), &meta)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let cfg_path = dir.join(CONFIG_FILE);
        let cfg_file =
            File::create(&cfg_path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
        serde_json::to_writer_pretty(BufWriter::new(cfg_file), &self.backend.core.config)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;

        let mut vocab = String::new();
        for i in 0..self.backend.tokenizer.vocab_size() {
            vocab.push_str(self.backend.tokenizer.token(i as u32).expect("dense vocab"));
            vocab.push('\n');
        }
        std::fs::write(dir.join(VOCAB_FILE), vocab)
            .map_err(|e| ModelError::Checkpoint(format!("vocab.txt: {e}")))?;

        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for map in [&self.backend.varmap, &self.head_varmap] {
            let data = map.data().lock().expect("varmap lock");
            for (name, var) in data.iter() {
                tensors.insert(name.clone(), var.as_tensor().clone());
            }
        }
        let weights_path: PathBuf = dir.join(WEIGHTS_FILE);
        candle_core::safetensors::save(&tensors, &weights_path)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", weights_path.display())))?;
        Ok(())
    }
}

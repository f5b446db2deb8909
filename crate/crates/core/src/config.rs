//! Pipeline configuration: one TOML file holding paths, the external
//! resource mode, label-guessing and training parameters, the backend
//! selection, and the ablation switches. CLI flags override file values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::Pooling;
use crate::mining::MiningParams;
use crate::supervision::WikiMode;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub corpus: PathBuf,
    pub schema: PathBuf,
    pub wiki: PathBuf,
    #[serde(default)]
    pub gold: Option<PathBuf>,
    pub workdir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuessParams {
    pub k: usize,
    pub m: usize,
    pub beta: f64,
    pub cross_vocab_threshold: f64,
    /// Mine the evaluation users' own utterances as well as the supervision
    /// documents; turn off to restrict guessing to external resources.
    pub transductive: bool,
}

impl Default for GuessParams {
    fn default() -> Self {
        Self { k: 50, m: 100, beta: 0.4, cross_vocab_threshold: 0.5, transductive: true }
    }
}

impl GuessParams {
    pub fn mining_params(&self, masked: bool) -> MiningParams {
        MiningParams {
            k: self.k,
            m: self.m,
            beta: self.beta,
            cross_vocab_threshold: self.cross_vocab_threshold,
            masked,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "real")]
    Real,
    #[serde(rename = "mock")]
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Local directory with the pre-trained weights (real backend).
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
    /// Mock description file (mock backend).
    #[serde(default)]
    pub mock_spec: Option<PathBuf>,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Sequence-vector pooling; defaults to the backend's native choice
    /// (cls for real, mean for mock).
    #[serde(default)]
    pub pooling: Option<Pooling>,
    /// Replace occurrence tokens with the mask token during guessing.
    #[serde(default)]
    pub masked_guess: bool,
}

fn default_max_len() -> usize {
    512
}

impl BackendConfig {
    pub fn effective_pooling(&self) -> Pooling {
        self.pooling.unwrap_or(match self.kind {
            BackendKind::Real => Pooling::Cls,
            BackendKind::Mock => Pooling::Mean,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub use_word_supervision: bool,
    pub use_doc_supervision: bool,
    pub use_confidence_weight: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self { use_word_supervision: true, use_doc_supervision: true, use_confidence_weight: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub mode: WikiMode,
    #[serde(default)]
    pub guess: GuessParams,
    #[serde(default)]
    pub train: TrainConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl PipelineConfig {
    /// Full validation; every numeric parameter is checked before any stage
    /// does work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.ablation.use_word_supervision && !self.ablation.use_doc_supervision {
            return Err(ConfigError::Invalid(
                "at least one of ablation.use_word_supervision / ablation.use_doc_supervision must be true".into(),
            ));
        }
        self.guess
            .mining_params(self.backend.masked_guess)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.backend.max_len < 3 {
            return Err(ConfigError::Invalid("backend.max_len must be at least 3".into()));
        }
        match self.backend.kind {
            BackendKind::Real => {
                if self.backend.weights_dir.is_none() {
                    return Err(ConfigError::Invalid("backend.kind = \"real\" requires backend.weights_dir".into()));
                }
            }
            BackendKind::Mock => {
                if self.backend.mock_spec.is_none() {
                    return Err(ConfigError::Invalid("backend.kind = \"mock\" requires backend.mock_spec".into()));
                }
                if self.backend.pooling == Some(Pooling::Cls) {
                    return Err(ConfigError::Invalid(
                        "the mock backend has no summary position; backend.pooling must be \"mean\"".into(),
                    ));
                }
                if self.backend.masked_guess {
                    return Err(ConfigError::Invalid(
                        "the mock backend has no mask token; backend.masked_guess requires kind = \"real\"".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Joins every relative path onto `base` (the config file's directory).
    pub fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        join(&mut self.paths.corpus);
        join(&mut self.paths.schema);
        join(&mut self.paths.wiki);
        if let Some(g) = self.paths.gold.as_mut() {
            join(g);
        }
        join(&mut self.paths.workdir);
        if let Some(w) = self.backend.weights_dir.as_mut() {
            join(w);
        }
        if let Some(m) = self.backend.mock_spec.as_mut() {
            join(m);
        }
    }
}

/// Reads, resolves, and validates a config file.
pub fn load_config(path: &Path) -> Result<PipelineConfig, ConfigError> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
    let mut cfg: PipelineConfig = toml::from_str(&raw)
        .map_err(|e| ConfigError::Parse { path: path.display().to_string(), reason: e.to_string() })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    cfg.resolve_paths(base);
    cfg.validate()?;
    Ok(cfg)
}

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskdata::{Dataset, Subtask};

/// Architecture hyperparameters. Head count and feed-forward width are
/// not fixed by the model description; the defaults here are desk-scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Number of co-attention blocks.
    pub blocks: usize,
    pub d_ff: usize,
    pub memory_capacity: usize,
    /// Dropout inside encoder feed-forward layers.
    pub dropout: f64,
    /// Dropout in the candidate classifier.
    pub head_dropout: f64,
    pub head_hidden: usize,
    /// Hidden width of the attention-reduction scorer; 0 means `d_model`.
    pub reduce_hidden: usize,
    /// Object feature width; 0 means "take it from the dataset".
    pub d_obj: usize,
    /// Vocabulary size; 0 means "take it from the dataset".
    pub vocab_size: usize,
    /// Longest object list the positional table covers.
    pub max_objects: usize,
    pub max_tokens: usize,
    pub subtask: Subtask,
    pub layer_norm_eps: f64,
    /// Standard deviation of the initial token embeddings.
    pub embedding_init_std: f64,
    /// Standard deviation of the initial object projection; 0 means Glorot.
    pub object_init_std: f64,
    /// Start the fusion attention layers near identity maps.
    pub fusion_identity_init: bool,
    /// Multimodal fusion layer on/off (off = text rows plus one mean-pooled object row).
    pub fusion: bool,
    pub memory: bool,
    /// Read the trained memory at evaluation time instead of an empty cell.
    pub memory_at_eval: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            blocks: 2,
            d_ff: 128,
            memory_capacity: 32,
            dropout: 0.1,
            head_dropout: 0.3,
            head_hidden: 1024,
            reduce_hidden: 0,
            d_obj: 0,
            vocab_size: 0,
            max_objects: 16,
            max_tokens: 64,
            subtask: Subtask::Qa,
            layer_norm_eps: 1e-5,
            embedding_init_std: 1.0,
            object_init_std: 0.5,
            fusion_identity_init: true,
            fusion: true,
            memory: true,
            memory_at_eval: false,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration used for gradient and oracle checks.
    pub fn tiny() -> Self {
        Self { d_model: 8, heads: 2, blocks: 2, d_ff: 16, memory_capacity: 4, head_hidden: 64, ..Self::default() }
    }

    /// Width and depth at the scale of large pretrained systems.
    pub fn full_scale() -> Self {
        Self { d_model: 512, heads: 8, blocks: 6, d_ff: 2048, ..Self::default() }
    }

    pub fn reduce_width(&self) -> usize {
        if self.reduce_hidden == 0 {
            self.d_model
        } else {
            self.reduce_hidden
        }
    }

    /// Fills dataset-derived fields left at 0 and checks the rest agree.
    pub fn resolve_for(&mut self, data: &Dataset) -> Result<()> {
        if self.d_obj == 0 {
            self.d_obj = data.d_obj;
        }
        if self.vocab_size == 0 {
            self.vocab_size = data.vocabulary.len();
        }
        self.check_dataset(data)
    }

    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if self.d_obj != data.d_obj || self.vocab_size != data.vocabulary.len() {
            return Err(Error::Input(format!(
                "model expects d_obj={} vocab={}, dataset has d_obj={} vocab={}",
                self.d_obj,
                self.vocab_size,
                data.d_obj,
                data.vocabulary.len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = [
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("d_ff", self.d_ff),
            ("memory_capacity", self.memory_capacity),
            ("head_hidden", self.head_hidden),
            ("d_obj", self.d_obj),
            ("vocab_size", self.vocab_size),
            ("max_objects", self.max_objects),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return err(format!("{name} must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return err(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_model % 2 != 0 {
            return err(format!("d_model {} must be even for positional encoding", self.d_model));
        }
        if self.d_ff < self.d_model {
            return err(format!("d_ff {} below d_model {}", self.d_ff, self.d_model));
        }
        for (name, r) in [("dropout", self.dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return err(format!("{name} {r} outside [0, 1)"));
            }
        }
        if !(self.embedding_init_std > 0.0 && self.embedding_init_std.is_finite()) {
            return err("embedding_init_std must be positive".into());
        }
        if !(self.object_init_std >= 0.0 && self.object_init_std.is_finite()) {
            return err("object_init_std must be non-negative".into());
        }
        if !(self.layer_norm_eps > 0.0) {
            return err("layer_norm_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    Double,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Linear learning-rate ramp over the first this many steps (0 = none).
    pub warmup_steps: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, warmup_steps: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clipping threshold.
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub precision: Precision,
    /// Stop after this many optimizer steps (0 = no limit).
    pub max_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 30,
            seed: 0,
            clip_norm: 1.0,
            checkpoint_every: 0,
            precision: Precision::Single,
            max_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

pub fn load_toml<C: DeserializeOwned>(path: &Path) -> Result<C> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Parse { location: path.display().to_string(), detail: e.to_string() })
}

pub fn to_toml<C: Serialize>(config: &C) -> String {
    toml::to_string(config).expect("configs serialize to TOML")
}

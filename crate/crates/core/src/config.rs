//! Model, training and decoding configuration, with a flat `key = value`
//! text format.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which encoder/attention combination the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// Linearized records, one Transformer, standard attention.
    #[serde(rename = "flat")]
    Flat,
    /// Hierarchical encoder, record attention over encoded records.
    #[serde(rename = "hier-kv")]
    HierKv,
    /// Hierarchical encoder, record attention over key embeddings only.
    #[serde(rename = "hier-k")]
    HierK,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Flat, Scenario::HierKv, Scenario::HierK];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Flat => "flat",
            Scenario::HierKv => "hier-kv",
            Scenario::HierK => "hier-k",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        !matches!(self, Scenario::Flat)
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Scenario::Flat),
            "hier-kv" => Ok(Scenario::HierKv),
            "hier-k" => Ok(Scenario::HierK),
            _ => Err(Error::Config(format!("unknown scenario `{s}` (expected flat, hier-kv or hier-k)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub key_embed_dim: usize,
    pub value_embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { key_embed_dim: 20, value_embed_dim: 300, hidden_dim: 300, layers: 2, heads: 2, dropout: 0.5 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("key_embed_dim", self.key_embed_dim),
            ("value_embed_dim", self.value_embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scenario: Scenario,
    pub encoder: EncoderConfig,
    pub decoder_layers: usize,
    /// Build the hierarchical context from encoded record states instead of
    /// raw record embeddings.
    pub context_over_states: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::HierK,
            encoder: EncoderConfig::default(),
            decoder_layers: 2,
            context_over_states: false,
        }
    }
}

impl ModelConfig {
    pub fn hidden(&self) -> usize {
        self.encoder.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_layers == 0 {
            return Err(Error::Config("decoder_layers must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_updates: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub checkpoint_every: usize,
    pub average_last_k: usize,
    pub seed: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            total_updates: 25_000,
            lr: 0.001,
            lr_halving_period: 10_000,
            checkpoint_every: 1_000,
            average_last_k: 5,
            seed: 1,
            grad_clip: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("lr_halving_period", self.lr_halving_period),
            ("checkpoint_every", self.checkpoint_every),
            ("average_last_k", self.average_last_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::Config("grad_clip must be non-negative".into()));
        }
        if self.total_updates > 0 && self.average_last_k > self.total_updates / self.checkpoint_every {
            return Err(Error::Config(format!(
                "average_last_k {} exceeds the {} checkpoints written",
                self.average_last_k,
                self.total_updates / self.checkpoint_every
            )));
        }
        Ok(())
    }

    /// Learning rate for the 0-based update index `u`.
    pub fn lr_at(&self, u: usize) -> f64 {
        self.lr * 0.5f64.powi((u / self.lr_halving_period) as i32)
    }
}

/// Decoding settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub beam: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    /// Number of top candidates scanned for end markers each step; values
    /// below `beam` mean `beam`.
    pub finish_width: usize,
}

impl SearchConfig {
    /// Plain beam search ranked by log-probability.
    pub fn new(beam: usize, max_len: usize) -> Self {
        Self { beam, max_len, length_penalty: 0.0, finish_width: beam }
    }

    pub fn finish_width(&self) -> usize {
        self.finish_width.max(self.beam)
    }

    /// `((5 + len) / 6)^length_penalty`.
    pub fn length_norm(&self, len: usize) -> f64 {
        ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
    }
}

/// Everything a run needs: model, training, vocabulary and decoding settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_freq: usize,
    pub beam: usize,
    pub max_len: usize,
    /// Exponent of the beam length penalty; 0 ranks hypotheses by raw
    /// log-probability.
    pub length_penalty: f64,
    /// See [`SearchConfig::finish_width`]; 0 means the beam size.
    pub finish_width: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            min_freq: 1,
            beam: 5,
            max_len: 600,
            length_penalty: 0.0,
            finish_width: 0,
        }
    }
}

impl RunConfig {
    /// Beam settings of this run.
    pub fn search(&self) -> SearchConfig {
        SearchConfig {
            beam: self.beam,
            max_len: self.max_len,
            length_penalty: self.length_penalty,
            finish_width: self.finish_width,
        }
    }

    /// Desk-scale settings for the synthetic corpus.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig {
                encoder: EncoderConfig {
                    key_embed_dim: 20,
                    value_embed_dim: 64,
                    hidden_dim: 64,
                    layers: 1,
                    heads: 2,
                    dropout: 0.1,
                },
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 2,
                total_updates: 3_000,
                lr_halving_period: 1_000,
                checkpoint_every: 200,
                ..TrainConfig::default()
            },
            min_freq: 1,
            beam: 5,
            max_len: 100,
            length_penalty: 1.0,
            finish_width: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("beam and max_len must be positive".into()));
        }
        if !(self.length_penalty >= 0.0 && self.length_penalty.is_finite()) {
            return Err(Error::Config("length_penalty must be a non-negative number".into()));
        }
        Ok(())
    }

    const KEYS: [&'static str; 22] = [
        "scenario",
        "key_embed_dim",
        "value_embed_dim",
        "hidden_dim",
        "layers",
        "heads",
        "dropout",
        "decoder_layers",
        "context_over_states",
        "batch_size",
        "total_updates",
        "lr",
        "lr_halving_period",
        "checkpoint_every",
        "average_last_k",
        "seed",
        "grad_clip",
        "min_freq",
        "beam",
        "max_len",
        "length_penalty",
        "finish_width",
    ];

    fn get(&self, key: &str) -> String {
        let m = &self.model;
        let e = &m.encoder;
        let t = &self.train;
        match key {
            "scenario" => m.scenario.to_string(),
            "key_embed_dim" => e.key_embed_dim.to_string(),
            "value_embed_dim" => e.value_embed_dim.to_string(),
            "hidden_dim" => e.hidden_dim.to_string(),
            "layers" => e.layers.to_string(),
            "heads" => e.heads.to_string(),
            "dropout" => e.dropout.to_string(),
            "decoder_layers" => m.decoder_layers.to_string(),
            "context_over_states" => m.context_over_states.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "total_updates" => t.total_updates.to_string(),
            "lr" => t.lr.to_string(),
            "lr_halving_period" => t.lr_halving_period.to_string(),
            "checkpoint_every" => t.checkpoint_every.to_string(),
            "average_last_k" => t.average_last_k.to_string(),
            "seed" => t.seed.to_string(),
            "grad_clip" => t.grad_clip.to_string(),
            "min_freq" => self.min_freq.to_string(),
            "beam" => self.beam.to_string(),
            "max_len" => self.max_len.to_string(),
            "length_penalty" => self.length_penalty.to_string(),
            "finish_width" => self.finish_width.to_string(),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Sets one field by name from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value.parse().map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
        }
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "scenario" => m.scenario = value.parse()?,
            "key_embed_dim" => m.encoder.key_embed_dim = parse(key, value)?,
            "value_embed_dim" => m.encoder.value_embed_dim = parse(key, value)?,
            "hidden_dim" => m.encoder.hidden_dim = parse(key, value)?,
            "layers" => m.encoder.layers = parse(key, value)?,
            "heads" => m.encoder.heads = parse(key, value)?,
            "dropout" => m.encoder.dropout = parse(key, value)?,
            "decoder_layers" => m.decoder_layers = parse(key, value)?,
            "context_over_states" => m.context_over_states = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "total_updates" => t.total_updates = parse(key, value)?,
            "lr" => t.lr = parse(key, value)?,
            "lr_halving_period" => t.lr_halving_period = parse(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, value)?,
            "average_last_k" => t.average_last_k = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "grad_clip" => t.grad_clip = parse(key, value)?,
            "min_freq" => self.min_freq = parse(key, value)?,
            "beam" => self.beam = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "length_penalty" => self.length_penalty = parse(key, value)?,
            "finish_width" => self.finish_width = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// One `key = value` line per field, in a fixed order.
    pub fn to_text(&self) -> String {
        Self::KEYS.iter().map(|k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// SHA-256 over the fields that determine the parameter layout and the
    /// forward computation.
    pub fn model_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for k in &Self::KEYS[..9] {
            h.update(format!("{k}={}\n", self.get(k)).as_bytes());
        }
        h.finalize().into()
    }
}

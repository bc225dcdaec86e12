//! Data-to-text generation from structured records with a hierarchical
//! Transformer encoder, hierarchical attention over entities and their
//! records, and an LSTM decoder with a copy switch.
//!
//! Everything runs on a small reverse-mode autodiff engine over `f64`
//! matrices ([`tensor`]). A synthetic basketball corpus ([`toygen`]) and a
//! rule-based relation extractor ([`evaluation`]) make the whole pipeline
//! runnable at desk scale.

pub mod attention;
pub mod config;
pub mod datamodel;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod toygen;
pub mod training;

pub use attention::AttentionStep;
pub use config::{EncoderConfig, ModelConfig, RunConfig, Scenario, SearchConfig, TrainConfig};
pub use datamodel::{DataStructure, Dataset, Description, Entity, EntityKind, Example, Record, Split, Vocabulary};
pub use decoder::Generation;
pub use error::{Error, Result};
pub use evaluation::{MetricsReport, RelationTuple};
pub use model::Model;
pub use pipeline::{Corpus, RunResult};
pub use toygen::ToyGenConfig;

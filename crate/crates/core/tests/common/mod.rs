#![allow(dead_code)]

pub mod grad;
pub mod invariance;
pub mod metrics;
pub mod search;
pub mod train;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hierd2t::config::{EncoderConfig, ModelConfig, Scenario};
use hierd2t::datamodel::{
    align_copies, build_vocab, DataStructure, Dataset, Description, Entity, EntityKind, Example, Record, Split,
    Vocabulary,
};
use hierd2t::decoder::PreparedExample;
use hierd2t::model::Model;

pub const KEYS: [&str; 6] = ["AST", "BLK", "MIN", "PTS", "REB", "STL"];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_config(scenario: Scenario) -> ModelConfig {
    ModelConfig {
        scenario,
        encoder: EncoderConfig {
            key_embed_dim: 4,
            value_embed_dim: 6,
            hidden_dim: 8,
            layers: 1,
            heads: 2,
            dropout: 0.0,
        },
        decoder_layers: 2,
        context_over_states: false,
    }
}

/// Entities with 1..=`max_records` records each; keys unique per entity,
/// values drawn from a small pool so some repeat across entities.
pub fn random_structure(rng: &mut ChaCha8Rng, entities: usize, max_records: usize) -> DataStructure {
    let entities = (0..entities)
        .map(|i| {
            let mut keys = KEYS.to_vec();
            keys.shuffle(rng);
            let n = rng.random_range(1..=max_records.min(KEYS.len()));
            let mut records = vec![Record::new("NAME", format!("ent{i}"))];
            records.extend(keys[..n].iter().map(|k| Record::new(*k, rng.random_range(0..12).to_string())));
            Entity { kind: if i < 2 { EntityKind::Team } else { EntityKind::Player }, records }
        })
        .collect();
    DataStructure { entities }
}

/// A description mixing filler words and record values of `s`.
pub fn random_description(rng: &mut ChaCha8Rng, s: &DataStructure, len: usize) -> Description {
    let values: Vec<&str> = s.entities.iter().flat_map(|e| e.records.iter().map(|r| r.value.as_str())).collect();
    let filler = ["the", "scored", "points", "and", "."];
    let tokens = (0..len)
        .map(|_| {
            if rng.random_bool(0.4) {
                values[rng.random_range(0..values.len())].to_string()
            } else {
                filler[rng.random_range(0..filler.len())].to_string()
            }
        })
        .collect();
    Description { tokens }
}

pub fn example(structure: DataStructure, description: Description) -> Example {
    let mut ex = Example::new(structure, description);
    align_copies(&mut ex);
    ex
}

pub struct Fixture {
    pub example: Example,
    pub vocab: Vocabulary,
    pub prepared: PreparedExample,
}

pub fn fixture(seed: u64, entities: usize, max_records: usize, desc_len: usize) -> Fixture {
    let mut r = rng(seed);
    let s = random_structure(&mut r, entities, max_records);
    let d = random_description(&mut r, &s, desc_len);
    let example = example(s, d);
    let vocab = build_vocab(&Dataset { examples: vec![example.clone()], split: Split::Train }, 1).unwrap();
    let prepared = PreparedExample::new(&example, &vocab).unwrap();
    Fixture { example, vocab, prepared }
}

pub fn model(scenario: Scenario, vocab: &Vocabulary, seed: u64) -> Model {
    Model::new(&small_config(scenario), vocab, seed).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

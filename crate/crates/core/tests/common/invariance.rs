use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use hierd2t::attention::{attend, record_scores_k, record_scores_kv, AttentionStep};
use hierd2t::config::Scenario;
use hierd2t::datamodel::{DataStructure, Example, RecordRef, Vocabulary};
use hierd2t::decoder::{example_loss, PreparedExample};
use hierd2t::encoder::{encode, StructureInput};
use hierd2t::model::Model;
use hierd2t::tensor::{Graph, Tensor};

use super::*;

pub const PERMUTATION_TOLERANCE: f64 = 1e-9;

/// An example with its entities and each entity's records shuffled. New
/// entity `k` is old entity `entities[k]`; its record `j` is old record
/// `records[k][j]`. Copy pointers follow their records.
pub struct Permuted {
    pub example: Example,
    pub entities: Vec<usize>,
    pub records: Vec<Vec<usize>>,
}

impl Permuted {
    pub fn new(ex: &Example, rng: &mut ChaCha8Rng) -> Self {
        let n = ex.structure.entities.len();
        let mut entities: Vec<usize> = (0..n).collect();
        entities.shuffle(rng);
        let records: Vec<Vec<usize>> = entities
            .iter()
            .map(|&i| {
                let mut r: Vec<usize> = (0..ex.structure.entities[i].records.len()).collect();
                r.shuffle(rng);
                r
            })
            .collect();
        let structure = DataStructure {
            entities: entities
                .iter()
                .zip(&records)
                .map(|(&i, perm)| {
                    let old = &ex.structure.entities[i];
                    let mut e = old.clone();
                    e.records = perm.iter().map(|&j| old.records[j].clone()).collect();
                    e
                })
                .collect(),
        };
        let new_entity: Vec<usize> = inverse(&entities);
        let new_record: Vec<Vec<usize>> = (0..n).map(|i| inverse(&records[new_entity[i]])).collect();
        let mut example = Example::new(structure, ex.description.clone());
        example.copy_alignment = ex
            .copy_alignment
            .iter()
            .map(|a| a.map(|r| RecordRef { entity: new_entity[r.entity], record: new_record[r.entity][r.record] }))
            .collect();
        Self { example, entities, records }
    }

    /// Old flat record index of every new flat record index.
    pub fn flat_source(&self, old: &DataStructure) -> Vec<usize> {
        let offsets = &old.offsets();
        self.entities
            .iter()
            .zip(&self.records)
            .flat_map(|(&i, perm)| perm.iter().map(move |&j| offsets[i] + j))
            .collect()
    }
}

fn inverse(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (new, &old) in p.iter().enumerate() {
        inv[old] = new;
    }
    inv
}

/// What the permutation suite compares.
pub struct Observed {
    pub summary: Vec<f64>,
    pub entity_states: Option<Tensor>,
    pub record_states: Tensor,
    pub step: AttentionStep,
    pub loss: f64,
}

/// Encodes `ex`, attends once from the fixed decoder state `d_t` and
/// computes the eval-mode loss.
pub fn observe(model: &Model, vocab: &Vocabulary, ex: &Example, d_t: &Tensor) -> Observed {
    let mut g = Graph::new(&model.params);
    let input = StructureInput::new(&ex.structure, vocab).unwrap();
    let enc = encode(&mut g, &model.encoder, &input).unwrap();
    let d = g.constant(d_t.clone()).unwrap();
    let out = attend(&mut g, &model.config, &model.attention, d, &enc).unwrap();
    let step = AttentionStep::read(&g, &out, &enc.layout);
    let prep = PreparedExample::new(ex, vocab).unwrap();
    let loss = example_loss(&mut g, model, &prep).unwrap();
    Observed {
        summary: g.value(enc.summary).data().to_vec(),
        entity_states: enc.entity_states.map(|v| g.value(v).clone()),
        record_states: g.value(enc.record_states).clone(),
        step,
        loss: g.value(loss).data()[0],
    }
}

fn row(t: &Tensor, r: usize) -> &[f64] {
    let cols = t.shape()[1];
    &t.data()[r * cols..(r + 1) * cols]
}

/// Largest deviation between the observations of an example and its
/// permutation, after undoing the permutation on the permuted quantities.
pub fn permutation_error(model: &Model, vocab: &Vocabulary, ex: &Example, p: &Permuted, d_t: &Tensor) -> f64 {
    let a = observe(model, vocab, ex, d_t);
    let b = observe(model, vocab, &p.example, d_t);
    let mut worst = max_abs_diff(&a.summary, &b.summary)
        .max(max_abs_diff(&a.step.context, &b.step.context))
        .max((a.loss - b.loss).abs());
    if let (Some(ea), Some(eb)) = (&a.entity_states, &b.entity_states) {
        for (k, &i) in p.entities.iter().enumerate() {
            worst = worst.max(max_abs_diff(row(ea, i), row(eb, k)));
        }
    }
    for (nf, of) in p.flat_source(&ex.structure).into_iter().enumerate() {
        worst = worst.max(max_abs_diff(row(&a.record_states, of), row(&b.record_states, nf)));
        worst = worst.max((a.step.copy[of] - b.step.copy[nf]).abs());
    }
    for (k, (&i, perm)) in p.entities.iter().zip(&p.records).enumerate() {
        worst = worst.max((a.step.alpha[i] - b.step.alpha[k]).abs());
        for (j, &oj) in perm.iter().enumerate() {
            worst = worst.max((a.step.beta[i][oj] - b.step.beta[k][j]).abs());
        }
    }
    worst
}

pub fn random_row(rng: &mut ChaCha8Rng, cols: usize) -> Tensor {
    Tensor::new(vec![1, cols], (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst permutation error over `fixtures` random examples and every
/// scenario, plus the number of non-trivial permutations drawn.
pub fn permutation_suite(fixtures: usize) -> (f64, usize) {
    let mut worst: f64 = 0.0;
    let mut nontrivial = 0;
    for seed in 0..fixtures as u64 {
        let mut r = rng(1000 + seed);
        let entities = r.random_range(2..=5);
        let fx = fixture(1000 + seed, entities, 4, 12);
        let p = Permuted::new(&fx.example, &mut r);
        if p.example.structure != fx.example.structure {
            nontrivial += 1;
        }
        for scenario in Scenario::ALL {
            let m = model(scenario, &fx.vocab, seed);
            let d_t = random_row(&mut r, m.config.hidden());
            worst = worst.max(permutation_error(&m, &fx.vocab, &fx.example, &p, &d_t));
        }
    }
    (worst, nontrivial)
}

/// Record scores at a fixed decoder state under the model's own
/// within-entity scorer.
pub fn beta_at(model: &Model, vocab: &Vocabulary, ex: &Example, d_t: &Tensor) -> Vec<f64> {
    let mut g = Graph::new(&model.params);
    let input = StructureInput::new(&ex.structure, vocab).unwrap();
    let enc = encode(&mut g, &model.encoder, &input).unwrap();
    let d = g.constant(d_t.clone()).unwrap();
    let a = &model.attention;
    let beta = match model.config.scenario {
        Scenario::HierK => record_scores_k(&mut g, d, enc.key_embeddings, a.w_key.unwrap(), &enc.layout),
        Scenario::HierKv => record_scores_kv(&mut g, d, enc.record_states, a.w_beta.unwrap(), &enc.layout),
        Scenario::Flat => panic!("flat attention has no within-entity scores"),
    }
    .unwrap();
    g.value(beta).data().to_vec()
}

/// Perturbs the value embedding of every record of every fixture in turn.
/// Returns `(hier-k perturbations with bit-identical β, total, hier-kv
/// perturbations that changed β)`.
pub fn key_guided_suite(fixtures: usize) -> (usize, usize, usize) {
    let (mut identical, mut total, mut changed) = (0, 0, 0);
    for seed in 0..fixtures as u64 {
        let mut r = rng(5000 + seed);
        let fx = fixture(5000 + seed, 3, 4, 10);
        let input = StructureInput::new(&fx.example.structure, &fx.vocab).unwrap();
        for scenario in [Scenario::HierK, Scenario::HierKv] {
            let mut m = model(scenario, &fx.vocab, seed);
            let d_t = random_row(&mut r, m.config.hidden());
            let base = beta_at(&m, &fx.vocab, &fx.example, &d_t);
            let table = m.encoder.value_embed;
            for &v in &input.value_ids {
                let saved = m.params.value(table).clone();
                let cols = saved.shape()[1];
                for x in &mut m.params.value_mut(table).data_mut()[v * cols..(v + 1) * cols] {
                    *x += r.random_range(-1.0..1.0);
                }
                let beta = beta_at(&m, &fx.vocab, &fx.example, &d_t);
                *m.params.value_mut(table) = saved;
                let same = beta.iter().zip(&base).all(|(a, b)| a.to_bits() == b.to_bits());
                if scenario == Scenario::HierK {
                    total += 1;
                    identical += usize::from(same);
                } else {
                    changed += usize::from(!same);
                }
            }
        }
    }
    (identical, total, changed)
}

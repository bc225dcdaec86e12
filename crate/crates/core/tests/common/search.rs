use rand::Rng;

use hierd2t::config::{Scenario, SearchConfig};
use hierd2t::datamodel::{
    build_vocab, DataStructure, Dataset, Description, Entity, EntityKind, Record, Split, Vocabulary,
};
use hierd2t::decoder::{
    beam_search, decode_step, extended_distribution, init_state, CopyMap, DecoderState, Generation,
};
use hierd2t::encoder::{encode, EncodedStructure, StructureInput};
use hierd2t::model::Model;
use hierd2t::tensor::Graph;

use super::*;

pub const BEAM_SIZES: [usize; 4] = [1, 2, 5, 10];

/// A model over the five words `<pad> <unk> <s> </s> x` whose records all
/// hold `x`, so copy and generation share one extended vocabulary of five.
/// Output weights are sharpened and the end marker penalized by a random
/// amount so that the best sequence is not always the shortest.
pub struct TinyFixture {
    pub model: Model,
    pub vocab: Vocabulary,
    pub input: StructureInput,
    pub map: CopyMap,
}

pub fn tiny_fixture(seed: u64) -> TinyFixture {
    let mut r = rng(seed);
    let entities = (0..r.random_range(1..=3))
        .map(|_| Entity {
            kind: EntityKind::Player,
            records: vec![Record::new("NAME", "x"), Record::new("PTS", "x"), Record::new("REB", "x")]
                [..r.random_range(1..=3)]
                .to_vec(),
        })
        .collect();
    let structure = DataStructure { entities };
    let ex = example(structure.clone(), Description::parse("x x").unwrap());
    let vocab = build_vocab(&Dataset { examples: vec![ex], split: Split::Train }, 1).unwrap();
    assert_eq!(vocab.words.len(), 5);
    let scenario = Scenario::ALL[seed as usize % 3];
    let mut model = model(scenario, &vocab, seed);
    let (w, b) = model.decoder.out;
    for x in model.params.value_mut(w).data_mut() {
        *x *= 4.0;
    }
    model.params.value_mut(b).data_mut()[Vocabulary::EOS_ID] -= r.random_range(0.0..3.0);
    let input = StructureInput::new(&structure, &vocab).unwrap();
    let values = structure.entities.iter().flat_map(|e| e.records.iter().map(|r| r.value.as_str()));
    let map = CopyMap::new(values, &vocab);
    assert_eq!(map.ext_size(), 5);
    TinyFixture { model, vocab, input, map }
}

/// Best sequence found by enumerating every continuation up to `max_len`
/// steps: `(ids without the end marker, logprob, finished)`.
pub struct Exhaustive {
    pub ext_ids: Vec<usize>,
    pub logprob: f64,
    pub finished: bool,
    pub score: f64,
}

struct Dfs<'g, 'a> {
    g: &'g mut Graph<'a>,
    enc: EncodedStructure,
    search: SearchConfig,
    best_final: Option<Exhaustive>,
    best_open: Option<Exhaustive>,
    leaves: usize,
}

fn better(cand: &Exhaustive, cur: &Option<Exhaustive>) -> bool {
    match cur {
        None => true,
        Some(c) => cand.score > c.score || (cand.score == c.score && cand.ext_ids < c.ext_ids),
    }
}

impl Dfs<'_, '_> {
    fn visit(&mut self, fx: &TinyFixture, state: &DecoderState, ids: &mut Vec<usize>, logprob: f64) {
        let prev = ids.last().map_or(Vocabulary::BOS_ID, |&e| fx.map.input_id(e));
        let (out, next) = decode_step(self.g, &fx.model, state, prev, &self.enc).unwrap();
        let p = extended_distribution(self.g, &out, &fx.map).unwrap();
        for (ext, &pw) in p.iter().enumerate() {
            let lp = logprob + pw.ln();
            if ext == Vocabulary::EOS_ID {
                self.leaves += 1;
                let score = lp / self.search.length_norm(ids.len() + 1);
                let cand = Exhaustive { ext_ids: ids.clone(), logprob: lp, finished: true, score };
                if better(&cand, &self.best_final) {
                    self.best_final = Some(cand);
                }
                continue;
            }
            ids.push(ext);
            if ids.len() == self.search.max_len {
                self.leaves += 1;
                let cand = Exhaustive { ext_ids: ids.clone(), logprob: lp, finished: false, score: lp };
                if better(&cand, &self.best_open) {
                    self.best_open = Some(cand);
                }
            } else {
                self.visit(fx, &next, ids, lp);
            }
            ids.pop();
        }
    }
}

/// Exhaustive argmax and the number of enumerated sequences.
pub fn exhaustive(fx: &TinyFixture, search: &SearchConfig) -> (Exhaustive, usize) {
    let mut g = Graph::new(&fx.model.params);
    let enc = encode(&mut g, &fx.model.encoder, &fx.input).unwrap();
    let state = init_state(&mut g, &fx.model, enc.summary).unwrap();
    let mut dfs = Dfs { g: &mut g, enc, search: *search, best_final: None, best_open: None, leaves: 0 };
    dfs.visit(fx, &state, &mut Vec::new(), 0.0);
    let leaves = dfs.leaves;
    (dfs.best_final.or(dfs.best_open).unwrap(), leaves)
}

pub fn beam(fx: &TinyFixture, search: &SearchConfig) -> Generation {
    beam_search(&fx.model, &fx.vocab, &fx.input, &fx.map, search).unwrap()
}

pub fn matches_oracle(gen: &Generation, best: &Exhaustive) -> bool {
    gen.ext_ids == best.ext_ids && gen.finished == best.finished && gen.logprob == best.logprob
}

/// `(fixtures where width-125 beam equals the exhaustive argmax, fixtures,
/// fixtures whose argmax is longer than one step)`.
pub fn beam_oracle_suite(fixtures: u64, length_penalty: f64) -> (usize, usize, usize) {
    let (mut ok, mut long) = (0, 0);
    for seed in 0..fixtures {
        let fx = tiny_fixture(seed);
        let search = SearchConfig { length_penalty, ..SearchConfig::new(125, 3) };
        let (best, leaves) = exhaustive(&fx, &search);
        assert_eq!(leaves, 1 + 4 + 16 + 64);
        let gen = beam(&fx, &search);
        ok += usize::from(matches_oracle(&gen, &best));
        long += usize::from(!best.ext_ids.is_empty());
    }
    (ok, fixtures as usize, long)
}

/// `(finished, logprob)` returned for each of [`BEAM_SIZES`].
pub fn beam_sweep(fx: &TinyFixture, max_len: usize) -> Vec<(bool, f64)> {
    BEAM_SIZES
        .iter()
        .map(|&b| {
            let g = beam(fx, &SearchConfig::new(b, max_len));
            (g.finished, g.logprob)
        })
        .collect()
}

/// Search objective order: any finished hypothesis beats the unfinished
/// fallback, then higher log-probability wins.
pub fn objective_non_decreasing(s: &[(bool, f64)]) -> bool {
    s.windows(2).all(|w| (w[1].0, w[1].1) >= (w[0].0, w[0].1))
}

pub fn raw_non_decreasing(s: &[(bool, f64)]) -> bool {
    s.windows(2).all(|w| w[1].1 >= w[0].1)
}

pub struct Monotonicity {
    pub sweeps: usize,
    /// Sweeps non-decreasing in the search objective order.
    pub objective: usize,
    /// Sweeps whose raw returned log-probability is non-decreasing.
    pub raw: usize,
    /// Raw violations where a narrower beam returned an unfinished fallback.
    pub raw_fallback_only: usize,
}

pub fn monotonicity_suite(fixtures: u64) -> Monotonicity {
    let mut m = Monotonicity { sweeps: 0, objective: 0, raw: 0, raw_fallback_only: 0 };
    for seed in 0..fixtures {
        let fx = tiny_fixture(seed);
        for max_len in [3, 6] {
            let s = beam_sweep(&fx, max_len);
            m.sweeps += 1;
            m.objective += usize::from(objective_non_decreasing(&s));
            if raw_non_decreasing(&s) {
                m.raw += 1;
            } else if s.windows(2).all(|w| w[1].1 >= w[0].1 || !w[0].0) {
                m.raw_fallback_only += 1;
            }
        }
    }
    m
}

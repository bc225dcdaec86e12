//! Shared fixtures for the benchmarks.

use hierd2t::datamodel::{align_copies, build_vocab};
use hierd2t::toygen::{generate_corpus, ToyGenConfig};
use hierd2t::{Dataset, Example, Model, RunConfig, Scenario, Split, Vocabulary};

/// A handful of toy examples, their vocabulary and a freshly initialized
/// toy-size model.
pub struct Fixture {
    pub examples: Vec<Example>,
    pub vocab: Vocabulary,
    pub model: Model,
}

pub fn fixture(scenario: Scenario) -> Fixture {
    let cfg = ToyGenConfig { train: 20, valid: 1, test: 1, ..ToyGenConfig::default() };
    let (_, train) = generate_corpus(&cfg).unwrap().into_iter().find(|(s, _)| *s == Split::Train).unwrap();
    let examples: Vec<Example> = train
        .into_iter()
        .map(|t| {
            let mut e = t.example;
            align_copies(&mut e);
            e
        })
        .collect();
    let vocab = build_vocab(&Dataset { examples: examples.clone(), split: Split::Train }, 1).unwrap();
    let mut run = RunConfig::toy();
    run.model.scenario = scenario;
    let model = Model::new(&run.model, &vocab, 1).unwrap();
    Fixture { examples, vocab, model }
}

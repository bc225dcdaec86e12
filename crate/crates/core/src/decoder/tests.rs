use super::*;
use crate::config::{EncoderConfig, Scenario, SearchConfig};
use crate::datamodel::{
    align_copies, build_vocab, DataStructure, Dataset, Description, Entity, EntityKind, Record, Split,
};

fn example() -> Example {
    let team =
        Entity { kind: EntityKind::Team, records: vec![Record::new("NAME", "Hawks"), Record::new("PTS", "101")] };
    let player = Entity {
        kind: EntityKind::Player,
        records: vec![Record::new("NAME", "Jo_Lee"), Record::new("PTS", "22"), Record::new("AST", "7")],
    };
    let mut ex = Example::new(
        DataStructure { entities: vec![team, player] },
        Description::parse("the Hawks scored 101 points , Jo_Lee had 22 .").unwrap(),
    );
    align_copies(&mut ex);
    ex
}

fn small(scenario: Scenario) -> ModelConfig {
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

fn setup(scenario: Scenario) -> (Model, Vocabulary, PreparedExample) {
    let ds = Dataset { examples: vec![example()], split: Split::Train };
    let vocab = build_vocab(&ds, 1).unwrap();
    let model = Model::new(&small(scenario), &vocab, 7).unwrap();
    let prep = PreparedExample::new(&ds.examples[0], &vocab).unwrap();
    (model, vocab, prep)
}

#[test]
fn prepared_targets_mark_copies_and_end() {
    let (_, vocab, prep) = setup(Scenario::HierK);
    assert_eq!(prep.len(), 11);
    assert_eq!(prep.inputs[0], Vocabulary::BOS_ID);
    assert_eq!(prep.targets[1], Target::Copy(0));
    assert_eq!(prep.targets[3], Target::Copy(1));
    assert_eq!(prep.targets[6], Target::Copy(2));
    assert_eq!(prep.targets[0], Target::Generate(vocab.word_id("the")));
    assert_eq!(*prep.targets.last().unwrap(), Target::Generate(Vocabulary::EOS_ID));
}

#[test]
fn copy_map_assigns_oov_ids_after_vocab() {
    let (_, vocab, _) = setup(Scenario::HierK);
    let map = CopyMap::new(["Hawks", "999", "999", "abc"], &vocab);
    let v = vocab.words.len();
    assert_eq!(map.record_ext, vec![vocab.word_id("Hawks"), v, v, v + 1]);
    assert_eq!(map.token(v + 1, &vocab), "abc");
    assert_eq!(map.input_id(v), Vocabulary::UNK_ID);
}

#[test]
fn uniform_generation_without_copy_gives_log_vocab() {
    let (mut model, _, prep) = setup(Scenario::HierK);
    let v = model.vocab_size();
    model.params.value_mut(model.decoder.out.0).data_mut().fill(0.0);
    model.params.value_mut(model.decoder.out.1).data_mut().fill(0.0);
    model.params.value_mut(model.decoder.switch.0).data_mut().fill(0.0);
    model.params.value_mut(model.decoder.switch.1).data_mut().fill(-800.0);
    let generated: Vec<Target> =
        prep.inputs.iter().skip(1).map(|&w| Target::Generate(w)).chain([Target::Generate(3)]).collect();
    let prep = PreparedExample { targets: generated, ..prep };
    let mut g = Graph::new(&model.params);
    let loss = example_loss(&mut g, &model, &prep).unwrap();
    let got = g.value(loss).data()[0];
    assert!((got - (v as f64).ln()).abs() < 1e-12, "{got}");
}

#[test]
fn loss_matches_step_by_step_mixture() {
    for scenario in Scenario::ALL {
        let (model, _, prep) = setup(scenario);
        let mut g = Graph::new(&model.params);
        let enc = crate::encoder::encode(&mut g, &model.encoder, &prep.structure).unwrap();
        let loss = nll_loss(&mut g, &model, &prep, &enc).unwrap();
        let batched = g.value(loss).data()[0];

        let mut state = init_state(&mut g, &model, enc.summary).unwrap();
        let mut total = 0.0;
        for (&inp, target) in prep.inputs.iter().zip(&prep.targets) {
            let (out, next) = decode_step(&mut g, &model, &state, inp, &enc).unwrap();
            let s = g.value(out.switch_prob).data()[0];
            total -= match *target {
                Target::Generate(w) => ((1.0 - s) * g.value(out.gen_dist).data()[w]).ln(),
                Target::Copy(n) => (s * g.value(out.copy_dist).data()[n]).ln(),
            };
            state = next;
        }
        let expected = total / prep.len() as f64;
        assert!((batched - expected).abs() < 1e-9, "{scenario}: {batched} vs {expected}");
    }
}

#[test]
fn extended_distribution_is_normalized() {
    let (model, _, prep) = setup(Scenario::HierKv);
    let mut g = Graph::new(&model.params);
    let enc = crate::encoder::encode(&mut g, &model.encoder, &prep.structure).unwrap();
    let state = init_state(&mut g, &model, enc.summary).unwrap();
    let (out, _) = decode_step(&mut g, &model, &state, Vocabulary::BOS_ID, &enc).unwrap();
    let p = extended_distribution(&g, &out, &prep.copy_map).unwrap();
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(p.iter().all(|x| *x >= 0.0));
}

#[test]
fn out_of_range_input_is_rejected() {
    let (model, _, prep) = setup(Scenario::Flat);
    let mut g = Graph::new(&model.params);
    let enc = crate::encoder::encode(&mut g, &model.encoder, &prep.structure).unwrap();
    let state = init_state(&mut g, &model, enc.summary).unwrap();
    let err = decode_step(&mut g, &model, &state, model.vocab_size(), &enc).unwrap_err();
    assert!(matches!(err, Error::IdOutOfRange { .. }));
}

#[test]
fn beam_of_one_matches_greedy() {
    for scenario in Scenario::ALL {
        let (model, vocab, prep) = setup(scenario);
        let greedy = greedy_decode(&model, &vocab, &prep.structure, &prep.copy_map, 12).unwrap();
        let beam = beam_search(&model, &vocab, &prep.structure, &prep.copy_map, &SearchConfig::new(1, 12)).unwrap();
        assert_eq!(greedy.ext_ids, beam.ext_ids);
        assert!((greedy.logprob - beam.logprob).abs() < 1e-9);
        assert_eq!(greedy.attention.len(), beam.attention.len());
    }
}

#[test]
fn zero_beam_is_an_error() {
    let (model, vocab, prep) = setup(Scenario::HierK);
    assert!(beam_search(&model, &vocab, &prep.structure, &prep.copy_map, &SearchConfig::new(0, 5)).is_err());
}

#[test]
fn attention_trace_has_one_step_per_token() {
    let (model, vocab, prep) = setup(Scenario::HierK);
    let gen = beam_search(&model, &vocab, &prep.structure, &prep.copy_map, &SearchConfig::new(3, 6)).unwrap();
    let steps = gen.tokens.len() + usize::from(gen.finished);
    assert_eq!(gen.attention.len(), steps);
    for step in &gen.attention {
        assert!(step.simplex_error().unwrap() < 1e-9);
        assert_eq!(step.alpha.len(), 2);
    }
}

#[test]
fn loaded_weights_must_match_scenario() {
    let (model, _, _) = setup(Scenario::HierK);
    let err = Model::from_params(&small(Scenario::Flat), model.params.clone()).unwrap_err();
    assert!(matches!(err, Error::Config(_) | Error::CheckpointMismatch(_)), "{err}");
    Model::from_params(&small(Scenario::HierK), model.params).unwrap();
}

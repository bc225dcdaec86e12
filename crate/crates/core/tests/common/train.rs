use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use hierd2t::config::{EncoderConfig, RunConfig};
use hierd2t::datamodel::build_vocab;
use hierd2t::pipeline::{run_one, Corpus};
use hierd2t::tensor::{write_checkpoint, ParamStore, Tensor};
use hierd2t::toygen::{write_corpus, ToyGenConfig};
use hierd2t::training::average_checkpoints;

use super::*;

const DIGEST: [u8; 32] = [7; 32];

fn store_of(values: &[(&str, Vec<f64>)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, v) in values {
        s.insert(*name, Tensor::new(vec![1, v.len()], v.clone()).unwrap()).unwrap();
    }
    s
}

fn write(dir: &Path, name: &str, store: &ParamStore) -> PathBuf {
    let p = dir.join(name);
    write_checkpoint(&p, store, DIGEST, false).unwrap();
    p
}

fn values(store: &ParamStore) -> Vec<Vec<f64>> {
    store.ids().map(|id| store.value(id).data().to_vec()).collect()
}

fn random_store(seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut v = |n: usize| (0..n).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<f64>>();
    store_of(&[("a", v(5)), ("b", v(3))])
}

/// Named averaging properties and whether each holds exactly.
pub fn averaging_checks(dir: &Path) -> Vec<(&'static str, bool)> {
    let one = write(dir, "one.bin", &store_of(&[("w", vec![1.0])]));
    let three = write(dir, "three.bin", &store_of(&[("w", vec![3.0])]));
    let pair = average_checkpoints(&[one, three]).unwrap();

    let x = random_store(1);
    let copies: Vec<PathBuf> = (0..5).map(|i| write(dir, &format!("same{i}.bin"), &x)).collect();
    let same = average_checkpoints(&copies).unwrap();
    let single = average_checkpoints(&copies[..1]).unwrap();

    let distinct: Vec<PathBuf> = (0..4).map(|i| write(dir, &format!("d{i}.bin"), &random_store(10 + i))).collect();
    let forward = average_checkpoints(&distinct).unwrap();
    let mut rev = distinct.clone();
    rev.reverse();
    rev.swap(0, 2);
    let shuffled = average_checkpoints(&rev).unwrap();

    vec![
        ("{1.0} and {3.0} average to {2.0}", values(&pair.params) == vec![vec![2.0]]),
        ("5 identical checkpoints average to the input", values(&same.params) == values(&x)),
        ("k=1 is the identity", values(&single.params) == values(&x)),
        ("order of inputs does not matter", values(&forward.params) == values(&shuffled.params)),
    ]
}

/// A run small enough to repeat twice inside the test suite.
pub fn mini_run_config() -> RunConfig {
    let mut cfg = RunConfig::toy();
    cfg.model.encoder =
        EncoderConfig { key_embed_dim: 6, value_embed_dim: 12, hidden_dim: 16, layers: 1, heads: 2, dropout: 0.1 };
    cfg.train.total_updates = 40;
    cfg.train.checkpoint_every = 10;
    cfg.train.lr_halving_period = 20;
    cfg.train.average_last_k = 3;
    cfg.max_len = 20;
    cfg
}

/// Corpus generation, training, decoding and scoring under `dir`.
pub fn mini_pipeline(dir: &Path) {
    let data = dir.join("data");
    let gen = ToyGenConfig { train: 40, valid: 8, test: 8, seed: 3, ..ToyGenConfig::default() };
    write_corpus(&gen, &data).unwrap();
    let corpus = Corpus::load(&data).unwrap();
    let vocab = build_vocab(&corpus.train, 1).unwrap();
    run_one(&corpus, &vocab, &mini_run_config(), &dir.join("run")).unwrap();
}

fn files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// Runs the mini pipeline in two directories and returns the compared file
/// names and those whose bytes differ.
pub fn determinism_check(a: &Path, b: &Path) -> (Vec<PathBuf>, Vec<PathBuf>) {
    mini_pipeline(a);
    mini_pipeline(b);
    let (fa, fb) = (files(a), files(b));
    assert_eq!(fa, fb, "different file sets");
    let differ = fa.iter().filter(|f| fs::read(a.join(f)).unwrap() != fs::read(b.join(f)).unwrap()).cloned().collect();
    (fa, differ)
}

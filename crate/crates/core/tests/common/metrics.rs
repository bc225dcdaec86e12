use std::collections::VecDeque;
use std::path::Path;

use hierd2t::datamodel::{parse_dataset, Split};
use hierd2t::evaluation::{bleu, co_similarity, extract_relations, BLEU_EPSILON};
use hierd2t::toygen::{dataset_path, read_sidecar, sidecar_path, write_corpus, ToyGenConfig};

pub const BLEU_TOLERANCE: f64 = 1e-6;

fn toks(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// `(computed, hand-computed)` BLEU for fixtures exercising clipping,
/// smoothing of empty orders and the brevity penalty.
pub fn bleu_fixtures() -> Vec<(f64, f64)> {
    let e = BLEU_EPSILON;
    let one = |c: &str, r: &str| bleu(&[toks(c)], &[toks(r)]).unwrap();
    vec![
        // clipped unigrams 1/4, no higher-order matches
        (one("the the the the", "the cat"), 100.0 * (0.25 * (e / 3.0) * (e / 2.0) * e).powf(0.25)),
        (
            one("the cat sat on the mat", "the cat is on the mat"),
            100.0 * (5.0 / 6.0 * 3.0 / 5.0 * 1.0 / 4.0 * (e / 3.0)).powf(0.25),
        ),
        // candidate of 4 against reference of 6: BP = exp(1 - 6/4)
        (one("on the mat .", "the cat is on the mat"), {
            let p = 3.0 / 4.0 * 2.0 / 3.0 * 1.0 / 2.0 * (e / 1.0);
            100.0 * (1.0f64 - 1.5).exp() * p.powf(0.25)
        }),
        // pooled over two pairs: 1-grams 7/8, 2-grams 5/6, 3-grams 3/4, 4-grams 1/2
        (
            bleu(&[toks("a b c d"), toks("w x y z")], &[toks("a b c d"), toks("w x y q")]).unwrap(),
            100.0 * (7.0 / 8.0 * 5.0 / 6.0 * 3.0 / 4.0 * 1.0 / 2.0f64).powf(0.25),
        ),
    ]
}

pub fn bleu_identity() -> f64 {
    let refs = vec![toks("the hawks beat the bulls 102 - 96 ."), toks("jo lee had 22 points .")];
    bleu(&refs, &refs).unwrap()
}

/// Restricted edit distance by shortest-path search over edit scripts:
/// states are `(consumed of a, consumed of b)`; moves are copy (free),
/// substitute, delete, insert and swap of an adjacent pair, each costing one.
/// A swapped pair is consumed whole, so it is never edited again.
pub fn edit_script_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut dist = vec![usize::MAX; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    let mut queue = VecDeque::from([(0usize, 0usize, 0usize)]);
    while let Some((i, j, d)) = queue.pop_front() {
        if d >= dist[idx(i, j)] {
            continue;
        }
        dist[idx(i, j)] = d;
        if i < n && j < m && a[i] == b[j] {
            queue.push_front((i + 1, j + 1, d));
        }
        let mut step = |ni: usize, nj: usize| queue.push_back((ni, nj, d + 1));
        if i < n && j < m {
            step(i + 1, j + 1);
        }
        if i < n {
            step(i + 1, j);
        }
        if j < m {
            step(i, j + 1);
        }
        if i + 1 < n && j + 1 < m && a[i] == b[j + 1] && a[i + 1] == b[j] {
            step(i + 2, j + 2);
        }
    }
    dist[idx(n, m)]
}

pub fn all_sequences(max_len: usize, alphabet: u8) -> Vec<Vec<u8>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<u8>| {
                (0..alphabet).map(move |c| {
                    let mut t = s.clone();
                    t.push(c);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

/// `(pairs where CO equals the oracle similarity exactly, pairs)` over all
/// sequences up to `max_len` on a 3-symbol alphabet.
pub fn co_oracle_suite(max_len: usize) -> (usize, usize) {
    let seqs = all_sequences(max_len, 3);
    let mut ok = 0;
    let mut total = 0;
    for a in &seqs {
        for b in &seqs {
            let longest = a.len().max(b.len());
            let expected =
                if longest == 0 { 100.0 } else { 100.0 * (1.0 - edit_script_distance(a, b) as f64 / longest as f64) };
            total += 1;
            ok += usize::from(co_similarity(a, b) == expected);
        }
    }
    (ok, total)
}

/// Writes a toy corpus of `n` examples and checks the extractor against the
/// sidecar relations read back from disk: `(exact matches, examples)`.
pub fn extractor_suite(dir: &Path, n: usize) -> (usize, usize) {
    let cfg =
        ToyGenConfig { train: n - 2 * (n / 10), valid: n / 10, test: n / 10, seed: 77, ..ToyGenConfig::default() };
    write_corpus(&cfg, dir).unwrap();
    let (mut ok, mut total) = (0, 0);
    for split in [Split::Train, Split::Valid, Split::Test] {
        let data = parse_dataset(&dataset_path(dir, split), split).unwrap();
        let sidecar = read_sidecar(&sidecar_path(dir, split)).unwrap();
        assert_eq!(data.examples.len(), sidecar.len());
        for (ex, rel) in data.examples.iter().zip(&sidecar) {
            total += 1;
            ok += usize::from(extract_relations(&ex.description.tokens, &ex.structure) == *rel);
        }
    }
    (ok, total)
}

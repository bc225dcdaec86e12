use std::collections::HashMap;

use crate::error::{Error, Result};

/// Added to a zero clipped n-gram count so the geometric mean stays defined.
pub const BLEU_EPSILON: f64 = 1e-9;
pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
pub fn clipped_matches<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand.iter().map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0))).sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus BLEU in percent: clipped 1..4-gram precisions pooled over the
/// corpus, geometric mean, brevity penalty `exp(1 - r/c)` when `c < r`.
pub fn bleu<T: AsRef<str>>(candidates: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::Evaluation("BLEU needs at least one candidate".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Evaluation(format!("{} candidates but {} references", candidates.len(), references.len())));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        c_len += c.len();
        r_len += r.len();
        for n in 1..=MAX_ORDER {
            let (m, t) = clipped_matches(c, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    if c_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..MAX_ORDER {
        if total[n] == 0 {
            return Ok(0.0);
        }
        let m = if matched[n] == 0 { BLEU_EPSILON } else { matched[n] as f64 };
        log_sum += (m / total[n] as f64).ln();
    }
    let bp = if c_len < r_len { (1.0 - r_len as f64 / c_len as f64).exp() } else { 1.0 };
    Ok(100.0 * bp * (log_sum / MAX_ORDER as f64).exp())
}

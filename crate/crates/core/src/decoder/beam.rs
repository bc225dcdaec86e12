use std::cmp::Ordering;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::{decode_step, init_state, CopyMap, DecoderState, StepOutput};
use crate::attention::AttentionStep;
use crate::config::SearchConfig;
use crate::datamodel::Vocabulary;
use crate::encoder::{encode, StructureInput};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Graph;

/// A decoded description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Surface tokens, without the end marker.
    pub tokens: Vec<String>,
    /// Extended-vocabulary ids of `tokens`.
    pub ext_ids: Vec<usize>,
    /// Sum of per-step log-probabilities (including the end marker if finished).
    pub logprob: f64,
    /// `logprob` divided by the length norm; equals `logprob` without a
    /// length penalty.
    pub score: f64,
    /// Whether the end marker was produced within the length limit.
    pub finished: bool,
    /// Attention of every decoding step, in order.
    pub attention: Vec<AttentionStep>,
}

impl Generation {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Mixture `(1 - s) · gen` over the word vocabulary plus `s · copy` scattered
/// onto the extended ids of the records.
pub fn extended_distribution(g: &Graph, out: &StepOutput, copy_map: &CopyMap) -> Result<Vec<f64>> {
    let gen = g.value(out.gen_dist).data();
    let copy = g.value(out.copy_dist).data();
    let s = g.value(out.switch_prob).data()[0];
    if gen.len() != copy_map.vocab_size || copy.len() != copy_map.record_ext.len() {
        return Err(Error::Shape {
            op: "extended_distribution",
            left: vec![gen.len(), copy.len()],
            right: vec![copy_map.vocab_size, copy_map.record_ext.len()],
        });
    }
    let mut p: Vec<f64> = gen.iter().map(|x| (1.0 - s) * x).collect();
    p.resize(copy_map.ext_size(), 0.0);
    for (&ext, &w) in copy_map.record_ext.iter().zip(copy) {
        p[ext] += s * w;
    }
    Ok(p)
}

struct TraceNode {
    step: AttentionStep,
    prev: Option<Rc<TraceNode>>,
}

fn unroll(mut node: Option<Rc<TraceNode>>) -> Vec<AttentionStep> {
    let mut out = Vec::new();
    while let Some(n) = node {
        out.push(n.step.clone());
        node = n.prev.clone();
    }
    out.reverse();
    out
}

#[derive(Clone)]
struct Hyp {
    ext_ids: Vec<usize>,
    logprob: f64,
    state: DecoderState,
    trace: Option<Rc<TraceNode>>,
}

struct Candidate {
    parent: usize,
    ext: usize,
    logprob: f64,
}

fn by_score_then_tokens(a: (f64, &[usize]), b: (f64, &[usize])) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then_with(|| a.1.cmp(b.1))
}

fn finish(hyp: Hyp, finished: bool, search: &SearchConfig, copy_map: &CopyMap, vocab: &Vocabulary) -> Generation {
    let score = hyp.logprob / search.length_norm(hyp.ext_ids.len());
    let mut ext_ids = hyp.ext_ids;
    if finished {
        ext_ids.pop();
    }
    Generation {
        tokens: ext_ids.iter().map(|&e| copy_map.token(e, vocab).to_string()).collect(),
        ext_ids,
        logprob: hyp.logprob,
        score,
        finished,
        attention: unroll(hyp.trace),
    }
}

/// Beam search over the extended vocabulary.
///
/// Each step ranks the continuations of all live hypotheses (ties broken
/// by the lexicographically smaller id sequence) and keeps the top `beam`;
/// those ending in the end marker are set aside as finished. With a
/// `finish_width` above `beam`, end markers ranked up to `finish_width` are
/// also finished, which lets long hypotheses end when the end marker is
/// never the most likely continuation. Finished hypotheses are
/// ranked by `logprob / length_norm(len)`, which is the raw log-probability
/// when the length penalty is 0. Search stops once no live hypothesis can
/// still overtake the best finished one: log-probabilities only decrease, so
/// a live score is bounded by `logprob / length_norm(max_len)`. The best
/// finished hypothesis is returned (earliest finished on ties), or the best
/// live one if none finished within `max_len` steps.
pub fn beam_search(
    model: &Model,
    vocab: &Vocabulary,
    structure: &StructureInput,
    copy_map: &CopyMap,
    search: &SearchConfig,
) -> Result<Generation> {
    let SearchConfig { beam, max_len, .. } = *search;
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut g = Graph::new(&model.params);
    let enc = encode(&mut g, &model.encoder, structure)?;
    let state = init_state(&mut g, model, enc.summary)?;
    let mut live = vec![Hyp { ext_ids: Vec::new(), logprob: 0.0, state, trace: None }];
    let mut finals: Vec<Hyp> = Vec::new();
    for _ in 0..max_len {
        let mut expanded = Vec::with_capacity(live.len());
        let mut cands = Vec::new();
        for (h, hyp) in live.iter().enumerate() {
            let prev = hyp.ext_ids.last().map_or(Vocabulary::BOS_ID, |&e| copy_map.input_id(e));
            let (out, next) = decode_step(&mut g, model, &hyp.state, prev, &enc)?;
            let p = extended_distribution(&g, &out, copy_map)?;
            for (ext, &pw) in p.iter().enumerate() {
                if pw > 0.0 {
                    cands.push(Candidate { parent: h, ext, logprob: hyp.logprob + pw.ln() });
                }
            }
            let step = AttentionStep::read(&g, &out.attention, &enc.layout);
            expanded.push((next, step));
        }
        // Live hypotheses all have the same length, so comparing the parent's
        // ids and then the new id orders the extended sequences. The order is
        // total, so selecting the top candidates before sorting them changes
        // nothing.
        let order = |a: &Candidate, b: &Candidate| {
            b.logprob
                .partial_cmp(&a.logprob)
                .unwrap_or(Ordering::Equal)
                .then_with(|| live[a.parent].ext_ids.cmp(&live[b.parent].ext_ids))
                .then_with(|| a.ext.cmp(&b.ext))
        };
        let width = search.finish_width();
        if cands.len() > width {
            cands.select_nth_unstable_by(width - 1, order);
            cands.truncate(width);
        }
        cands.sort_by(order);
        let mut next_live = Vec::with_capacity(beam);
        for (rank, c) in cands.into_iter().enumerate() {
            let is_end = c.ext == Vocabulary::EOS_ID;
            if !is_end && (rank >= beam || next_live.len() >= beam) {
                continue;
            }
            let (state, step) = &expanded[c.parent];
            let trace = Some(Rc::new(TraceNode { step: step.clone(), prev: live[c.parent].trace.clone() }));
            let mut ids = live[c.parent].ext_ids.clone();
            ids.push(c.ext);
            let hyp = Hyp { ext_ids: ids, logprob: c.logprob, state: state.clone(), trace };
            if is_end {
                finals.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
        let best_final =
            finals.iter().map(|h| h.logprob / search.length_norm(h.ext_ids.len())).fold(f64::NEG_INFINITY, f64::max);
        let live_norm = search.length_norm(if search.length_penalty > 0.0 { max_len } else { 0 });
        let best_live = live.iter().map(|h| h.logprob / live_norm).fold(f64::NEG_INFINITY, f64::max);
        if live.is_empty() || (!finals.is_empty() && best_final >= best_live) {
            break;
        }
    }
    if !finals.is_empty() {
        // stable sort keeps finalization order among exact ties
        let mut order: Vec<usize> = (0..finals.len()).collect();
        let score = |h: &Hyp| h.logprob / search.length_norm(h.ext_ids.len());
        order.sort_by(|&a, &b| score(&finals[b]).partial_cmp(&score(&finals[a])).unwrap_or(Ordering::Equal));
        let best = finals.swap_remove(order[0]);
        return Ok(finish(best, true, search, copy_map, vocab));
    }
    live.sort_by(|a, b| by_score_then_tokens((a.logprob, &a.ext_ids), (b.logprob, &b.ext_ids)));
    let best = live.into_iter().next().ok_or_else(|| Error::Evaluation("beam search produced no hypothesis".into()))?;
    Ok(finish(best, false, search, copy_map, vocab))
}

/// Repeatedly takes the most probable extended id (lowest id on ties) until
/// the end marker or `max_len` steps.
pub fn greedy_decode(
    model: &Model,
    vocab: &Vocabulary,
    structure: &StructureInput,
    copy_map: &CopyMap,
    max_len: usize,
) -> Result<Generation> {
    let mut g = Graph::new(&model.params);
    let enc = encode(&mut g, &model.encoder, structure)?;
    let mut state = init_state(&mut g, model, enc.summary)?;
    let mut hyp_ids = Vec::new();
    let mut logprob = 0.0;
    let mut trace = Vec::new();
    let mut finished = false;
    let mut prev = Vocabulary::BOS_ID;
    for _ in 0..max_len {
        let (out, next) = decode_step(&mut g, model, &state, prev, &enc)?;
        let p = extended_distribution(&g, &out, copy_map)?;
        trace.push(AttentionStep::read(&g, &out.attention, &enc.layout));
        let mut best = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = i;
            }
        }
        logprob += p[best].ln();
        state = next;
        if best == Vocabulary::EOS_ID {
            finished = true;
            break;
        }
        hyp_ids.push(best);
        prev = copy_map.input_id(best);
    }
    Ok(Generation {
        tokens: hyp_ids.iter().map(|&e| copy_map.token(e, vocab).to_string()).collect(),
        ext_ids: hyp_ids,
        logprob,
        score: logprob,
        finished,
        attention: trace,
    })
}

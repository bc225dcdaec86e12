//! Stacked LSTM decoder with input feeding, attention context and a copy
//! switch; teacher-forced NLL and beam search.

mod beam;

pub use beam::{beam_search, extended_distribution, greedy_decode, Generation};

use std::rc::Rc;

use rand::Rng;

use crate::attention::{attend, AttentionOutput};
use crate::config::ModelConfig;
use crate::datamodel::{Example, Vocabulary};
use crate::encoder::{affine, linear, EncodedStructure, StructureInput};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{Graph, Init, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub word_embed: ParamId,
    pub init_hidden: Vec<(ParamId, ParamId)>,
    pub init_cell: Vec<(ParamId, ParamId)>,
    /// Per layer, gates = [input; h] · W + b with gate order i, f, g, o.
    pub lstm: Vec<(ParamId, ParamId)>,
    pub out: (ParamId, ParamId),
    pub switch: (ParamId, ParamId),
}

impl DecoderParams {
    pub fn create<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, vocab: usize, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden();
        let word_embed = store.create("decoder.word_embed", vocab, d, Init::Embedding, rng)?;
        let mut init_hidden = Vec::new();
        let mut init_cell = Vec::new();
        let mut lstm = Vec::new();
        for l in 0..cfg.decoder_layers {
            init_hidden.push(linear(store, &format!("decoder.init.layer{l}.hidden"), d, d, rng)?);
            init_cell.push(linear(store, &format!("decoder.init.layer{l}.cell"), d, d, rng)?);
        }
        for l in 0..cfg.decoder_layers {
            // layer 0 reads [word embedding; previous context]
            let input = if l == 0 { 2 * d } else { d };
            lstm.push(linear(store, &format!("decoder.lstm.layer{l}"), input + d, 4 * d, rng)?);
        }
        let out = linear(store, "decoder.out", 2 * d, vocab, rng)?;
        let switch = linear(store, "decoder.switch", 2 * d, 1, rng)?;
        Ok(Self { word_embed, init_hidden, init_cell, lstm, out, switch })
    }

    pub fn resolve(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let lin = |n: String| -> Result<(ParamId, ParamId)> {
            Ok((store.id(&format!("{n}.W"))?, store.id(&format!("{n}.b"))?))
        };
        let layers = 0..cfg.decoder_layers;
        Ok(Self {
            word_embed: store.id("decoder.word_embed")?,
            init_hidden: layers.clone().map(|l| lin(format!("decoder.init.layer{l}.hidden"))).collect::<Result<_>>()?,
            init_cell: layers.clone().map(|l| lin(format!("decoder.init.layer{l}.cell"))).collect::<Result<_>>()?,
            lstm: layers.map(|l| lin(format!("decoder.lstm.layer{l}"))).collect::<Result<_>>()?,
            out: lin("decoder.out".into())?,
            switch: lin("decoder.switch".into())?,
        })
    }
}

/// Recurrent state between decoding steps.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// `(hidden, cell)` per layer, each `[1, d]`.
    pub layers: Vec<(Var, Var)>,
    /// Context of the previous step, fed back with the next input.
    pub prev_context: Var,
    /// 1-based index of the next step.
    pub step: usize,
}

/// `tanh(W z + b)` per layer for hidden and cell; zero initial context.
pub fn init_state(g: &mut Graph, model: &Model, z: Var) -> Result<DecoderState> {
    let p = &model.decoder;
    let mut layers = Vec::with_capacity(p.lstm.len());
    for (h, c) in p.init_hidden.iter().zip(&p.init_cell) {
        let hv = affine(g, z, *h)?;
        let cv = affine(g, z, *c)?;
        layers.push((g.tanh(hv), g.tanh(cv)));
    }
    let prev_context = g.constant(Tensor::zeros(vec![1, model.config.hidden()]))?;
    Ok(DecoderState { layers, prev_context, step: 1 })
}

struct StepCore {
    state: DecoderState,
    /// `[1, 2d]` = [d_t; c_t]
    features: Var,
    attention: AttentionOutput,
}

fn lstm_cell(g: &mut Graph, input: Var, (h, c): (Var, Var), w: (ParamId, ParamId), d: usize) -> Result<(Var, Var)> {
    let x = g.concat(&[input, h], 1)?;
    let gates = affine(g, x, w)?;
    let i = g.slice_cols(gates, 0, d)?;
    let f = g.slice_cols(gates, d, 2 * d)?;
    let cand = g.slice_cols(gates, 2 * d, 3 * d)?;
    let o = g.slice_cols(gates, 3 * d, 4 * d)?;
    let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_new = g.add(keep, write)?;
    let ct = g.tanh(c_new);
    let h_new = g.mul(o, ct)?;
    Ok((h_new, c_new))
}

fn step_core(
    g: &mut Graph,
    model: &Model,
    state: &DecoderState,
    prev_token: usize,
    enc: &EncodedStructure,
) -> Result<StepCore> {
    let vocab = model.vocab_size();
    if prev_token >= vocab {
        return Err(Error::IdOutOfRange { what: "decoder input token", id: prev_token, size: vocab });
    }
    let d = model.config.hidden();
    let rate = model.config.encoder.dropout;
    let p = &model.decoder;
    let emb = g.embedding_lookup(p.word_embed, &[prev_token])?;
    let emb = g.dropout(emb, rate)?;
    let mut input = g.concat(&[emb, state.prev_context], 1)?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, (&hc, &w)) in state.layers.iter().zip(&p.lstm).enumerate() {
        if l > 0 {
            input = g.dropout(input, rate)?;
        }
        let (h, c) = lstm_cell(g, input, hc, w, d)?;
        layers.push((h, c));
        input = h;
    }
    let d_t = input;
    let attention = attend(g, &model.config, &model.attention, d_t, enc)?;
    let features = g.concat(&[d_t, attention.context], 1)?;
    Ok(StepCore {
        state: DecoderState { layers, prev_context: attention.context, step: state.step + 1 },
        features,
        attention,
    })
}

/// Distributions produced by one decoding step.
#[derive(Clone, Copy, Debug)]
pub struct StepOutput {
    /// `[1, V]` softmax over the word vocabulary.
    pub gen_dist: Var,
    /// `[1, N]` distribution over records.
    pub copy_dist: Var,
    /// `[1, 1]` probability of copying.
    pub switch_prob: Var,
    pub attention: AttentionOutput,
}

pub fn decode_step(
    g: &mut Graph,
    model: &Model,
    state: &DecoderState,
    prev_token: usize,
    enc: &EncodedStructure,
) -> Result<(StepOutput, DecoderState)> {
    let core = step_core(g, model, state, prev_token, enc)?;
    let logits = affine(g, core.features, model.decoder.out)?;
    let gen_dist = g.softmax(logits, 1)?;
    let sw = affine(g, core.features, model.decoder.switch)?;
    let switch_prob = g.sigmoid(sw);
    let out = StepOutput { gen_dist, copy_dist: core.attention.copy_weights, switch_prob, attention: core.attention };
    Ok((out, core.state))
}

/// Supervision for one target position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Generate this word id from the vocabulary.
    Generate(usize),
    /// Copy the record at this flat (entity-major) index.
    Copy(usize),
}

/// Extended-vocabulary id of every record value: word ids below `V`, then
/// one id per distinct out-of-vocabulary value.
#[derive(Clone, Debug, PartialEq)]
pub struct CopyMap {
    pub record_ext: Vec<usize>,
    pub oov: Vec<String>,
    pub vocab_size: usize,
}

impl CopyMap {
    pub fn new(values: impl IntoIterator<Item = impl AsRef<str>>, vocab: &Vocabulary) -> Self {
        let vocab_size = vocab.words.len();
        let mut oov: Vec<String> = Vec::new();
        let record_ext = values
            .into_iter()
            .map(|v| {
                let v = v.as_ref();
                match vocab.words.id(v) {
                    Some(id) => id,
                    None => match oov.iter().position(|o| o == v) {
                        Some(k) => vocab_size + k,
                        None => {
                            oov.push(v.to_string());
                            vocab_size + oov.len() - 1
                        }
                    },
                }
            })
            .collect();
        Self { record_ext, oov, vocab_size }
    }

    pub fn ext_size(&self) -> usize {
        self.vocab_size + self.oov.len()
    }

    pub fn token<'v>(&'v self, ext: usize, vocab: &'v Vocabulary) -> &'v str {
        if ext < self.vocab_size {
            vocab.words.word(ext).unwrap_or(crate::datamodel::UNK)
        } else {
            &self.oov[ext - self.vocab_size]
        }
    }

    /// Word id to feed back after emitting `ext`.
    pub fn input_id(&self, ext: usize) -> usize {
        if ext < self.vocab_size {
            ext
        } else {
            Vocabulary::UNK_ID
        }
    }
}

/// An example converted to ids, ready for the model.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub structure: StructureInput,
    /// Decoder inputs: BOS followed by every description token.
    pub inputs: Vec<usize>,
    /// One target per input; the last is `Generate(EOS)`.
    pub targets: Vec<Target>,
    pub copy_map: Rc<CopyMap>,
}

impl PreparedExample {
    pub fn new(ex: &Example, vocab: &Vocabulary) -> Result<Self> {
        if !ex.is_aligned() {
            return Err(Error::InvalidData("example has no copy alignment".into()));
        }
        let structure = StructureInput::new(&ex.structure, vocab)?;
        let mut inputs = vec![Vocabulary::BOS_ID];
        let mut targets = Vec::with_capacity(ex.description.len() + 1);
        for (tok, align) in ex.description.tokens.iter().zip(&ex.copy_alignment) {
            inputs.push(vocab.word_id(tok));
            targets.push(match align {
                Some(r) => {
                    let n = structure.layout.flat_index(r.entity, r.record).ok_or_else(|| {
                        Error::InvalidData(format!("copy pointer ({}, {}) is out of range", r.entity, r.record))
                    })?;
                    Target::Copy(n)
                }
                None => Target::Generate(vocab.word_id(tok)),
            });
        }
        targets.push(Target::Generate(Vocabulary::EOS_ID));
        let values = ex.structure.entities.iter().flat_map(|e| e.records.iter().map(|r| r.value.as_str()));
        let copy_map = Rc::new(CopyMap::new(values, vocab));
        Ok(Self { structure, inputs, targets, copy_map })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Mean per-token negative log-likelihood under teacher forcing.
///
/// Generated token: `-log((1 - switch) · gen[y])`; copied token at record `n`:
/// `-log(switch · copy[n])`.
pub fn nll_loss(g: &mut Graph, model: &Model, ex: &PreparedExample, enc: &EncodedStructure) -> Result<Var> {
    let n_records = enc.layout.num_records();
    let vocab = model.vocab_size();
    let mut state = init_state(g, model, enc.summary)?;
    let mut features = Vec::with_capacity(ex.len());
    let mut copy_rows = Vec::new();
    let mut copy_steps = Vec::new();
    let mut copy_idx = Vec::new();
    let mut gen_steps = Vec::new();
    let mut gen_idx = Vec::new();
    for (t, (&inp, target)) in ex.inputs.iter().zip(&ex.targets).enumerate() {
        let core = step_core(g, model, &state, inp, enc)?;
        features.push(core.features);
        match *target {
            Target::Generate(w) => {
                if w >= vocab {
                    return Err(Error::IdOutOfRange { what: "target word", id: w, size: vocab });
                }
                gen_steps.push(t);
                gen_idx.push(t * vocab + w);
            }
            Target::Copy(n) => {
                if n >= n_records {
                    return Err(Error::IdOutOfRange { what: "copy target", id: n, size: n_records });
                }
                copy_idx.push(copy_rows.len() * n_records + n);
                copy_rows.push(core.attention.copy_weights);
                copy_steps.push(t);
            }
        }
        state = core.state;
    }
    let feats = g.concat(&features, 0)?;
    let feats = g.dropout(feats, model.config.encoder.dropout)?;
    let logits = affine(g, feats, model.decoder.out)?;
    let logp = g.log_softmax(logits)?;
    let sw = affine(g, feats, model.decoder.switch)?;

    let mut terms = Vec::with_capacity(4);
    if !gen_steps.is_empty() {
        let word = g.pick(logp, gen_idx.into())?;
        terms.push(g.sum(word));
        let neg = g.scale(sw, -1.0);
        let no_copy = g.log_sigmoid(neg);
        let no_copy = g.pick(no_copy, gen_steps.into())?;
        terms.push(g.sum(no_copy));
    }
    if !copy_steps.is_empty() {
        let copy = g.log_sigmoid(sw);
        let copy = g.pick(copy, copy_steps.into())?;
        terms.push(g.sum(copy));
        let rows = g.concat(&copy_rows, 0)?;
        let picked = g.pick(rows, copy_idx.into())?;
        let logs = g.log(picked);
        terms.push(g.sum(logs));
    }
    let total = g.concat(&terms, 1)?;
    let total = g.sum(total);
    Ok(g.scale(total, -1.0 / ex.len() as f64))
}

/// Encodes the structure and returns the loss in one call.
pub fn example_loss(g: &mut Graph, model: &Model, ex: &PreparedExample) -> Result<Var> {
    let enc = crate::encoder::encode(g, &model.encoder, &ex.structure)?;
    nll_loss(g, model, ex, &enc)
}

#[cfg(test)]
mod tests;

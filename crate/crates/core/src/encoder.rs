//! Record embeddings and the two Transformer levels.
//!
//! The low-level encoder runs over every entity at once: all records followed
//! by one `[ENT]` row per entity, with a block mask so that rows only attend
//! inside their own entity. No positional encoding is added anywhere, which
//! keeps both levels equivariant to permutations of their inputs.

use std::rc::Rc;

use rand::Rng;

use crate::config::{EncoderConfig, Scenario};
use crate::datamodel::{DataStructure, Vocabulary};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

/// Record ids of one data structure in entity-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct StructureInput {
    pub key_ids: Vec<usize>,
    pub value_ids: Vec<usize>,
    pub layout: Rc<Layout>,
}

/// Entity boundaries in the flattened record order.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Start of each entity plus the total record count.
    pub bounds: Rc<[usize]>,
    /// Owning entity of each record.
    pub record_entity: Rc<[usize]>,
}

impl Layout {
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        if sizes.is_empty() || sizes.contains(&0) {
            return Err(Error::InvalidData(format!("invalid entity sizes {sizes:?}")));
        }
        let mut bounds = vec![0];
        let mut owner = Vec::new();
        for (i, &n) in sizes.iter().enumerate() {
            bounds.push(bounds[i] + n);
            owner.extend(std::iter::repeat_n(i, n));
        }
        Ok(Self { bounds: bounds.into(), record_entity: owner.into() })
    }

    pub fn num_entities(&self) -> usize {
        self.bounds.len() - 1
    }

    pub fn num_records(&self) -> usize {
        *self.bounds.last().unwrap()
    }

    pub fn entity_range(&self, i: usize) -> std::ops::Range<usize> {
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn flat_index(&self, entity: usize, record: usize) -> Option<usize> {
        let r = self.entity_range(entity);
        (record < r.len()).then_some(r.start + record)
    }
}

impl StructureInput {
    pub fn new(structure: &DataStructure, vocab: &Vocabulary) -> Result<Self> {
        structure.validate()?;
        let mut key_ids = Vec::with_capacity(structure.num_records());
        let mut value_ids = Vec::with_capacity(structure.num_records());
        for e in &structure.entities {
            for r in &e.records {
                key_ids.push(vocab.key_id(&r.key)?);
                value_ids.push(vocab.value_id(&r.value));
            }
        }
        let sizes: Vec<usize> = structure.entities.iter().map(|e| e.records.len()).collect();
        Ok(Self { key_ids, value_ids, layout: Rc::new(Layout::from_sizes(&sizes)?) })
    }
}

/// Parameters of one pre-norm Transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct TransformerParams {
    blocks: Vec<BlockParams>,
    final_ln: (ParamId, ParamId),
    heads: usize,
}

pub(crate) fn linear<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Result<(ParamId, ParamId)> {
    Ok((
        store.create(format!("{name}.W"), fan_in, fan_out, Init::Glorot, rng)?,
        store.create(format!("{name}.b"), 1, fan_out, Init::Zeros, rng)?,
    ))
}

fn layer_norm_params<R: Rng>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<(ParamId, ParamId)> {
    Ok((
        store.create(format!("{name}.gain"), 1, d, Init::Ones, rng)?,
        store.create(format!("{name}.bias"), 1, d, Init::Zeros, rng)?,
    ))
}

fn resolve_linear(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{name}.W"))?, store.id(&format!("{name}.b"))?))
}

fn resolve_ln(store: &ParamStore, name: &str) -> Result<(ParamId, ParamId)> {
    Ok((store.id(&format!("{name}.gain"))?, store.id(&format!("{name}.bias"))?))
}

impl TransformerParams {
    pub fn create<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden_dim;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("{prefix}.layer{l}");
            blocks.push(BlockParams {
                ln1: layer_norm_params(store, &format!("{p}.ln1"), d, rng)?,
                wq: linear(store, &format!("{p}.q"), d, d, rng)?,
                wk: linear(store, &format!("{p}.k"), d, d, rng)?,
                wv: linear(store, &format!("{p}.v"), d, d, rng)?,
                wo: linear(store, &format!("{p}.o"), d, d, rng)?,
                ln2: layer_norm_params(store, &format!("{p}.ln2"), d, rng)?,
                ff1: linear(store, &format!("{p}.ff1"), d, 2 * d, rng)?,
                ff2: linear(store, &format!("{p}.ff2"), 2 * d, d, rng)?,
            });
        }
        Ok(Self {
            blocks,
            final_ln: layer_norm_params(store, &format!("{prefix}.final_ln"), d, rng)?,
            heads: cfg.heads,
        })
    }

    pub fn resolve(store: &ParamStore, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let blocks = (0..cfg.layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                Ok(BlockParams {
                    ln1: resolve_ln(store, &format!("{p}.ln1"))?,
                    wq: resolve_linear(store, &format!("{p}.q"))?,
                    wk: resolve_linear(store, &format!("{p}.k"))?,
                    wv: resolve_linear(store, &format!("{p}.v"))?,
                    wo: resolve_linear(store, &format!("{p}.o"))?,
                    ln2: resolve_ln(store, &format!("{p}.ln2"))?,
                    ff1: resolve_linear(store, &format!("{p}.ff1"))?,
                    ff2: resolve_linear(store, &format!("{p}.ff2"))?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks, final_ln: resolve_ln(store, &format!("{prefix}.final_ln"))?, heads: cfg.heads })
    }
}

pub(crate) fn affine(g: &mut Graph, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let wv = g.param(w);
    let bv = g.param(b);
    let y = g.matmul(x, wv)?;
    g.add_row(y, bv)
}

fn norm(g: &mut Graph, x: Var, (gain, bias): (ParamId, ParamId)) -> Result<Var> {
    let gv = g.param(gain);
    let bv = g.param(bias);
    g.layer_norm(x, gv, bv)
}

fn self_attention(g: &mut Graph, x: Var, p: &BlockParams, heads: usize, mask: Option<&[bool]>) -> Result<Var> {
    let d = g.shape(x)[1];
    let dh = d / heads;
    let q = affine(g, x, p.wq)?;
    let k = affine(g, x, p.wk)?;
    let v = affine(g, x, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (s, e) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, s, e)?;
        let kh = g.slice_cols(k, s, e)?;
        let vh = g.slice_cols(v, s, e)?;
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let attn = match mask {
            Some(m) => g.masked_softmax(scores, m)?,
            None => g.softmax(scores, 1)?,
        };
        outs.push(g.matmul(attn, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
    affine(g, cat, p.wo)
}

/// Stack of pre-norm blocks (norm → sublayer → dropout → residual) followed
/// by a final layer norm. `mask`, when given, is a row-major `n × n` table of
/// allowed attention edges.
pub fn transformer(
    g: &mut Graph,
    params: &TransformerParams,
    mut x: Var,
    mask: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    for b in &params.blocks {
        let h = norm(g, x, b.ln1)?;
        let a = self_attention(g, h, b, params.heads, mask)?;
        let a = g.dropout(a, dropout)?;
        x = g.add(x, a)?;
        let h = norm(g, x, b.ln2)?;
        let f = affine(g, h, b.ff1)?;
        let f = g.relu(f);
        let f = affine(g, f, b.ff2)?;
        let f = g.dropout(f, dropout)?;
        x = g.add(x, f)?;
    }
    norm(g, x, params.final_ln)
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub key_embed: ParamId,
    pub value_embed: ParamId,
    pub record: (ParamId, ParamId),
    pub ent: Option<ParamId>,
    pub low: Option<TransformerParams>,
    pub high: Option<TransformerParams>,
    pub flat: Option<TransformerParams>,
}

impl EncoderParams {
    pub fn create<R: Rng>(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        scenario: Scenario,
        num_keys: usize,
        num_values: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = cfg.hidden_dim;
        let key_embed = store.create("encoder.key_embed", num_keys, cfg.key_embed_dim, Init::Embedding, rng)?;
        let value_embed = store.create("encoder.value_embed", num_values, cfg.value_embed_dim, Init::Embedding, rng)?;
        let record = linear(store, "encoder.record", cfg.key_embed_dim + cfg.value_embed_dim, d, rng)?;
        let (ent, low, high, flat) = if scenario.is_hierarchical() {
            (
                Some(store.create("encoder.ent", 1, d, Init::Embedding, rng)?),
                Some(TransformerParams::create(store, "encoder.low", cfg, rng)?),
                Some(TransformerParams::create(store, "encoder.high", cfg, rng)?),
                None,
            )
        } else {
            (None, None, None, Some(TransformerParams::create(store, "encoder.flat", cfg, rng)?))
        };
        Ok(Self { config: cfg.clone(), key_embed, value_embed, record, ent, low, high, flat })
    }

    pub fn resolve(store: &ParamStore, cfg: &EncoderConfig, scenario: Scenario) -> Result<Self> {
        let hier = scenario.is_hierarchical();
        Ok(Self {
            config: cfg.clone(),
            key_embed: store.id("encoder.key_embed")?,
            value_embed: store.id("encoder.value_embed")?,
            record: resolve_linear(store, "encoder.record")?,
            ent: hier.then(|| store.id("encoder.ent")).transpose()?,
            low: hier.then(|| TransformerParams::resolve(store, "encoder.low", cfg)).transpose()?,
            high: hier.then(|| TransformerParams::resolve(store, "encoder.high", cfg)).transpose()?,
            flat: (!hier).then(|| TransformerParams::resolve(store, "encoder.flat", cfg)).transpose()?,
        })
    }
}

/// Outputs of either encoder.
#[derive(Clone, Debug)]
pub struct EncodedStructure {
    /// `[N, d]` outputs of the record embedding layer.
    pub record_embeddings: Var,
    /// `[N, d]` encoder outputs at record positions (low-level or flat).
    pub record_states: Var,
    /// `[N, key_embed_dim]`, used by key-guided attention.
    pub key_embeddings: Var,
    /// `[I, d]` outputs at the `[ENT]` positions (hierarchical only).
    pub entity_aggregates: Option<Var>,
    /// `[I, d]` high-level encoder outputs (hierarchical only).
    pub entity_states: Option<Var>,
    /// `[1, d]` structure summary used to initialize the decoder.
    pub summary: Var,
    pub layout: Rc<Layout>,
}

/// `ReLU(W_r [k; v] + b_r)` for every record; returns the record embeddings
/// and the key embeddings.
pub fn embed_records(g: &mut Graph, p: &EncoderParams, input: &StructureInput) -> Result<(Var, Var)> {
    let keys = g.embedding_lookup(p.key_embed, &input.key_ids)?;
    let values = g.embedding_lookup(p.value_embed, &input.value_ids)?;
    let kv = g.concat(&[keys, values], 1)?;
    let lin = affine(g, kv, p.record)?;
    Ok((g.relu(lin), keys))
}

/// Embedding of a single record as a `[1, d]` row.
pub fn embed_record(g: &mut Graph, p: &EncoderParams, key_id: usize, value_id: usize) -> Result<Var> {
    let input =
        StructureInput { key_ids: vec![key_id], value_ids: vec![value_id], layout: Rc::new(Layout::from_sizes(&[1])?) };
    Ok(embed_records(g, p, &input)?.0)
}

/// Block mask over `[records..., ENT_0..ENT_{I-1}]`: two rows may attend to
/// each other iff they belong to the same entity.
fn entity_block_mask(layout: &Layout) -> Vec<bool> {
    let n = layout.num_records();
    let owner: Vec<usize> = layout.record_entity.iter().copied().chain(0..layout.num_entities()).collect();
    let len = owner.len();
    let mut mask = vec![false; len * len];
    for r in 0..len {
        for c in 0..len {
            mask[r * len + c] = owner[r] == owner[c];
        }
    }
    debug_assert_eq!(len, n + layout.num_entities());
    mask
}

/// Encodes every entity's records together with its `[ENT]` row. Returns
/// `(record_states [N, d], entity_aggregates [I, d])`.
pub fn low_level_encode(g: &mut Graph, p: &EncoderParams, records: Var, layout: &Layout) -> Result<(Var, Var)> {
    let (ent, low) = match (p.ent, &p.low) {
        (Some(e), Some(l)) => (e, l),
        _ => return Err(Error::Config("low-level encoder requires hierarchical parameters".into())),
    };
    let n = layout.num_records();
    let i = layout.num_entities();
    if g.shape(records)[0] != n || n == 0 {
        return Err(Error::Shape { op: "low_level_encode", left: g.shape(records).to_vec(), right: vec![n] });
    }
    let ent_rows = {
        let e = g.param(ent);
        g.gather_rows(e, vec![0; i].into())?
    };
    let seq = g.concat(&[records, ent_rows], 0)?;
    let seq = g.dropout(seq, p.config.dropout)?;
    let mask = entity_block_mask(layout);
    let out = transformer(g, low, seq, Some(&mask), p.config.dropout)?;
    let states = g.gather_rows(out, (0..n).collect::<Vec<_>>().into())?;
    let aggregates = g.gather_rows(out, (n..n + i).collect::<Vec<_>>().into())?;
    Ok((states, aggregates))
}

/// Self-attention over entity aggregates; returns `(entity_states, z)` with
/// `z` the mean entity state.
pub fn high_level_encode(g: &mut Graph, p: &EncoderParams, aggregates: Var) -> Result<(Var, Var)> {
    let high =
        p.high.as_ref().ok_or_else(|| Error::Config("high-level encoder requires hierarchical parameters".into()))?;
    let states = transformer(g, high, aggregates, None, p.config.dropout)?;
    let z = g.mean(states, 0)?;
    Ok((states, z))
}

/// One Transformer over the linearized records; returns `(states, z)`.
pub fn flat_encode(g: &mut Graph, p: &EncoderParams, records: Var) -> Result<(Var, Var)> {
    let flat = p.flat.as_ref().ok_or_else(|| Error::Config("flat encoder requires flat parameters".into()))?;
    let seq = g.dropout(records, p.config.dropout)?;
    let states = transformer(g, flat, seq, None, p.config.dropout)?;
    let z = g.mean(states, 0)?;
    Ok((states, z))
}

pub fn encode(g: &mut Graph, p: &EncoderParams, input: &StructureInput) -> Result<EncodedStructure> {
    let (records, keys) = embed_records(g, p, input)?;
    if p.flat.is_some() {
        let (states, z) = flat_encode(g, p, records)?;
        return Ok(EncodedStructure {
            record_embeddings: records,
            record_states: states,
            key_embeddings: keys,
            entity_aggregates: None,
            entity_states: None,
            summary: z,
            layout: input.layout.clone(),
        });
    }
    let (states, aggregates) = low_level_encode(g, p, records, &input.layout)?;
    let (entity_states, z) = high_level_encode(g, p, aggregates)?;
    Ok(EncodedStructure {
        record_embeddings: records,
        record_states: states,
        key_embeddings: keys,
        entity_aggregates: Some(aggregates),
        entity_states: Some(entity_states),
        summary: z,
        layout: input.layout.clone(),
    })
}

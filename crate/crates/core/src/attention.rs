//! Per-step context computation for the three scenarios.
//!
//! Scores are bilinear, `d_t · W · x`, with no `1/sqrt(d)` scaling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Scenario};
use crate::encoder::{EncodedStructure, Layout};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Init, ParamId, ParamStore, Var};

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_alpha: Option<ParamId>,
    pub w_beta: Option<ParamId>,
    /// Key-guided record scores (`d × key_embed_dim`).
    pub w_key: Option<ParamId>,
    pub w_flat: Option<ParamId>,
}

impl AttentionParams {
    pub fn create<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.hidden();
        let kd = cfg.encoder.key_embed_dim;
        let mut p = Self { w_alpha: None, w_beta: None, w_key: None, w_flat: None };
        match cfg.scenario {
            Scenario::Flat => p.w_flat = Some(store.create("attention.W_flat", d, d, Init::Glorot, rng)?),
            Scenario::HierKv => {
                p.w_alpha = Some(store.create("attention.W_alpha", d, d, Init::Glorot, rng)?);
                p.w_beta = Some(store.create("attention.W_beta", d, d, Init::Glorot, rng)?);
            }
            Scenario::HierK => {
                p.w_alpha = Some(store.create("attention.W_alpha", d, d, Init::Glorot, rng)?);
                p.w_key = Some(store.create("attention.W_key", d, kd, Init::Glorot, rng)?);
            }
        }
        Ok(p)
    }

    pub fn resolve(store: &ParamStore, scenario: Scenario) -> Result<Self> {
        let get = |n: &str| store.id(n).map(Some);
        Ok(match scenario {
            Scenario::Flat => Self { w_alpha: None, w_beta: None, w_key: None, w_flat: get("attention.W_flat")? },
            Scenario::HierKv => {
                Self { w_alpha: get("attention.W_alpha")?, w_beta: get("attention.W_beta")?, w_key: None, w_flat: None }
            }
            Scenario::HierK => {
                Self { w_alpha: get("attention.W_alpha")?, w_beta: None, w_key: get("attention.W_key")?, w_flat: None }
            }
        })
    }
}

fn require(p: Option<ParamId>, what: &str) -> Result<ParamId> {
    p.ok_or_else(|| Error::Config(format!("scenario has no {what} parameter")))
}

/// `softmax_i(d_t W_α e_i)` as a `[1, I]` row.
pub fn entity_scores(g: &mut Graph, d_t: Var, entity_states: Var, w_alpha: ParamId) -> Result<Var> {
    let w = g.param(w_alpha);
    let u = g.matmul(d_t, w)?;
    let s = g.matmul_t(u, entity_states)?;
    g.softmax(s, 1)
}

fn segment_scores(g: &mut Graph, d_t: Var, items: Var, w: ParamId, layout: &Layout) -> Result<Var> {
    let w = g.param(w);
    let u = g.matmul(d_t, w)?;
    let s = g.matmul_t(u, items)?;
    g.segment_softmax(s, layout.bounds.clone())
}

/// `β_{i,j} ∝ exp(d_t W_β h_{i,j})`, normalized within each entity; `[1, N]`.
pub fn record_scores_kv(g: &mut Graph, d_t: Var, record_states: Var, w_beta: ParamId, layout: &Layout) -> Result<Var> {
    segment_scores(g, d_t, record_states, w_beta, layout)
}

/// Key-guided `β̂_{i,j} ∝ exp(d_t W_key k_{i,j})`, normalized within each
/// entity; `[1, N]`.
pub fn record_scores_k(g: &mut Graph, d_t: Var, key_embeddings: Var, w_key: ParamId, layout: &Layout) -> Result<Var> {
    segment_scores(g, d_t, key_embeddings, w_key, layout)
}

/// Returns `(c_t, copy weights)` where the copy weight of record `(i, j)` is
/// `α_i β_{i,j}` and `c_t = Σ_i α_i Σ_j β_{i,j} r_{i,j}`.
pub fn hierarchical_context(g: &mut Graph, alpha: Var, beta: Var, records: Var, layout: &Layout) -> Result<(Var, Var)> {
    let n = layout.num_records();
    if g.shape(alpha) != [1, layout.num_entities()] || g.shape(beta) != [1, n] || g.shape(records)[0] != n {
        return Err(Error::Shape {
            op: "hierarchical_context",
            left: g.shape(alpha).to_vec(),
            right: g.shape(beta).to_vec(),
        });
    }
    let expanded = g.gather_cols(alpha, layout.record_entity.clone())?;
    let weights = g.mul(expanded, beta)?;
    let ctx = g.matmul(weights, records)?;
    Ok((ctx, weights))
}

/// Standard attention over all records; returns `(c_t, weights)`.
pub fn flat_context(g: &mut Graph, d_t: Var, states: Var, w_flat: ParamId) -> Result<(Var, Var)> {
    let w = g.param(w_flat);
    let u = g.matmul(d_t, w)?;
    let s = g.matmul_t(u, states)?;
    let a = g.softmax(s, 1)?;
    Ok((g.matmul(a, states)?, a))
}

/// Graph handles of one attention evaluation.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub context: Var,
    /// `[1, N]` distribution over records, also the copy distribution.
    pub copy_weights: Var,
    /// `[1, I]`, hierarchical scenarios only.
    pub alpha: Option<Var>,
    /// `[1, N]` per-entity distributions, hierarchical scenarios only.
    pub beta: Option<Var>,
}

pub fn attend(
    g: &mut Graph,
    cfg: &ModelConfig,
    p: &AttentionParams,
    d_t: Var,
    enc: &EncodedStructure,
) -> Result<AttentionOutput> {
    let layout = &enc.layout;
    match cfg.scenario {
        Scenario::Flat => {
            let (context, w) = flat_context(g, d_t, enc.record_states, require(p.w_flat, "W_flat")?)?;
            Ok(AttentionOutput { context, copy_weights: w, alpha: None, beta: None })
        }
        scenario => {
            let entity_states =
                enc.entity_states.ok_or_else(|| Error::Config("hierarchical attention needs entity states".into()))?;
            let alpha = entity_scores(g, d_t, entity_states, require(p.w_alpha, "W_alpha")?)?;
            let beta = if scenario == Scenario::HierK {
                record_scores_k(g, d_t, enc.key_embeddings, require(p.w_key, "W_key")?, layout)?
            } else {
                record_scores_kv(g, d_t, enc.record_states, require(p.w_beta, "W_beta")?, layout)?
            };
            let source = if cfg.context_over_states { enc.record_states } else { enc.record_embeddings };
            let (context, w) = hierarchical_context(g, alpha, beta, source, layout)?;
            Ok(AttentionOutput { context, copy_weights: w, alpha: Some(alpha), beta: Some(beta) })
        }
    }
}

/// Score distributions of one decoding step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    /// Distribution over entities.
    pub alpha: Vec<f64>,
    /// Per entity, distribution over its records.
    pub beta: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    /// Flattened record distribution (`α_i β_{i,j}` or flat weights).
    pub copy: Vec<f64>,
}

impl AttentionStep {
    /// Reads the step out of the graph. For the flat scenario `alpha` is the
    /// attention mass of each entity and `beta` the within-entity renormalized
    /// weights.
    pub fn read(g: &Graph, out: &AttentionOutput, layout: &Layout) -> Self {
        let copy = g.value(out.copy_weights).data().to_vec();
        let context = g.value(out.context).data().to_vec();
        let ents = layout.num_entities();
        let (alpha, beta) = match (out.alpha, out.beta) {
            (Some(a), Some(b)) => {
                let b = g.value(b).data();
                (g.value(a).data().to_vec(), (0..ents).map(|i| b[layout.entity_range(i)].to_vec()).collect())
            }
            _ => {
                let alpha: Vec<f64> = (0..ents).map(|i| copy[layout.entity_range(i)].iter().sum()).collect();
                let beta = (0..ents)
                    .map(|i| {
                        let seg = &copy[layout.entity_range(i)];
                        if alpha[i] > 0.0 {
                            seg.iter().map(|w| w / alpha[i]).collect()
                        } else {
                            vec![1.0 / seg.len() as f64; seg.len()]
                        }
                    })
                    .collect();
                (alpha, beta)
            }
        };
        Self { alpha, beta, context, copy }
    }

    /// Largest deviation from 1 of Σα, every Σ_j β_{i,j} and Σ copy; `None`
    /// if any score is negative or non-finite.
    pub fn simplex_error(&self) -> Option<f64> {
        let all = self.alpha.iter().chain(self.beta.iter().flatten()).chain(&self.copy);
        if all.clone().any(|x| !x.is_finite() || *x < 0.0) {
            return None;
        }
        let dev = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs();
        let mut worst = dev(&self.alpha).max(dev(&self.copy));
        for b in &self.beta {
            worst = worst.max(dev(b));
        }
        Some(worst)
    }
}

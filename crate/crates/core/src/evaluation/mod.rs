//! BLEU and the extraction-based RG / CS / CO metrics.

mod bleu;
mod ordering;
mod relations;

pub use bleu::{bleu, clipped_matches, BLEU_EPSILON, MAX_ORDER};
pub use ordering::{co_similarity, damerau_levenshtein};
pub use relations::{extract_relations, extract_relations_with, is_factual, RelationTuple, DEFAULT_WINDOW};

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{DataStructure, Dataset};
use crate::error::{Error, Result};

/// Relation generation: (precision %, number of factual triples).
/// `None` precision when nothing was extracted.
pub fn rg_metrics(generated: &[RelationTuple], structure: &DataStructure) -> (Option<f64>, usize) {
    let unique: HashSet<&RelationTuple> = generated.iter().collect();
    let correct = unique.iter().filter(|t| is_factual(t, structure)).count();
    if unique.is_empty() {
        (None, 0)
    } else {
        (Some(100.0 * correct as f64 / unique.len() as f64), correct)
    }
}

/// Content selection: (precision %, recall %) over unique triples; `None`
/// where the denominator set is empty.
pub fn cs_metrics(generated: &[RelationTuple], gold: &[RelationTuple]) -> (Option<f64>, Option<f64>) {
    let g: HashSet<&RelationTuple> = generated.iter().collect();
    let r: HashSet<&RelationTuple> = gold.iter().collect();
    let common = g.intersection(&r).count() as f64;
    let p = (!g.is_empty()).then(|| 100.0 * common / g.len() as f64);
    let rc = (!r.is_empty()).then(|| 100.0 * common / r.len() as f64);
    (p, rc)
}

/// Content ordering between the generated triples that also occur in the
/// gold extraction and the gold sequence.
pub fn co_metric(generated: &[RelationTuple], gold: &[RelationTuple]) -> f64 {
    let in_gold: HashSet<&RelationTuple> = gold.iter().collect();
    let kept: Vec<&RelationTuple> = generated.iter().filter(|t| in_gold.contains(t)).collect();
    let gold: Vec<&RelationTuple> = gold.iter().collect();
    co_similarity(&kept, &gold)
}

pub fn harmonic_mean(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub rg_p: f64,
    pub rg_count: usize,
    pub cs_p: f64,
    pub cs_r: f64,
    pub co: f64,
    pub extracted: usize,
    pub gold_extracted: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu: f64,
    pub rg_p: f64,
    pub rg_count: f64,
    pub cs_p: f64,
    pub cs_r: f64,
    pub cs_f1: f64,
    pub co: f64,
    /// Examples whose generation yielded no triples (precision counted as 0).
    pub no_extraction: usize,
    /// Examples whose gold description yielded no triples (recall counted as 0).
    pub empty_gold: usize,
    pub per_example: Vec<ExampleMetrics>,
}

impl MetricsReport {
    pub fn values(&self) -> [f64; 7] {
        [self.bleu, self.rg_p, self.rg_count, self.cs_p, self.cs_r, self.cs_f1, self.co]
    }
}

pub const TABLE_COLUMNS: [&str; 7] = ["BLEU", "RG-P%", "RG-#", "CS-P%", "CS-R%", "F1", "CO"];

/// Scores generations against the dataset's reference descriptions.
pub fn report<T: AsRef<str>>(dataset: &Dataset, generations: &[Vec<T>]) -> Result<MetricsReport> {
    if generations.is_empty() {
        return Err(Error::Evaluation("no generations to evaluate".into()));
    }
    if generations.len() != dataset.examples.len() {
        return Err(Error::Evaluation(format!(
            "{} generations for {} examples",
            generations.len(),
            dataset.examples.len()
        )));
    }
    let refs: Vec<Vec<&str>> =
        dataset.examples.iter().map(|e| e.description.tokens.iter().map(String::as_str).collect()).collect();
    let cands: Vec<Vec<&str>> = generations.iter().map(|g| g.iter().map(AsRef::as_ref).collect()).collect();
    let bleu_score = bleu(&cands, &refs)?;

    let mut per_example = Vec::with_capacity(cands.len());
    let (mut no_extraction, mut empty_gold) = (0, 0);
    for (ex, cand) in dataset.examples.iter().zip(&cands) {
        let gen = extract_relations(cand, &ex.structure);
        let gold = extract_relations(&ex.description.tokens, &ex.structure);
        let (rg_p, rg_count) = rg_metrics(&gen, &ex.structure);
        let (cs_p, cs_r) = cs_metrics(&gen, &gold);
        no_extraction += usize::from(rg_p.is_none());
        empty_gold += usize::from(cs_r.is_none());
        per_example.push(ExampleMetrics {
            rg_p: rg_p.unwrap_or(0.0),
            rg_count,
            cs_p: cs_p.unwrap_or(0.0),
            cs_r: cs_r.unwrap_or(0.0),
            co: co_metric(&gen, &gold),
            extracted: gen.len(),
            gold_extracted: gold.len(),
        });
    }
    let n = per_example.len() as f64;
    let mean = |f: fn(&ExampleMetrics) -> f64| per_example.iter().map(f).sum::<f64>() / n;
    let cs_p = mean(|m| m.cs_p);
    let cs_r = mean(|m| m.cs_r);
    Ok(MetricsReport {
        bleu: bleu_score,
        rg_p: mean(|m| m.rg_p),
        rg_count: mean(|m| m.rg_count as f64),
        cs_p,
        cs_r,
        cs_f1: harmonic_mean(cs_p, cs_r),
        co: mean(|m| m.co),
        no_extraction,
        empty_gold,
        per_example,
    })
}

/// Aligned text table, one row per label.
pub fn format_table(rows: &[(String, Vec<String>)]) -> String {
    let label_w = rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0).max("model".len());
    let mut widths: Vec<usize> = TABLE_COLUMNS.iter().map(|c| c.len()).collect();
    for (_, cells) in rows {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let _ = write!(out, "{:<label_w$}", "model");
    for (c, w) in TABLE_COLUMNS.iter().zip(&widths) {
        let _ = write!(out, "  {c:>w$}");
    }
    out.push('\n');
    for (label, cells) in rows {
        let _ = write!(out, "{label:<label_w$}");
        for (c, w) in cells.iter().zip(&widths) {
            let _ = write!(out, "  {c:>w$}");
        }
        out.push('\n');
    }
    out
}

pub fn report_row(r: &MetricsReport) -> Vec<String> {
    r.values().iter().map(|v| format!("{v:.2}")).collect()
}

//! End-to-end runs: corpus loading, training, decoding a split, scoring, and
//! the scenario ablation.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::AttentionStep;
use crate::config::{RunConfig, Scenario, SearchConfig};
use crate::datamodel::{build_vocab, parse_dataset, DataStructure, Dataset, Split, Vocabulary};
use crate::decoder::{beam_search, CopyMap, Generation};
use crate::encoder::StructureInput;
use crate::error::{io_err, Error, Result};
use crate::evaluation::{format_table, report, report_row, MetricsReport, TABLE_COLUMNS};
use crate::model::Model;
use crate::toygen::dataset_path;
use crate::training::{evaluate_loss, load_model, train};

/// The three splits of a corpus directory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            train: parse_dataset(&dataset_path(dir, Split::Train), Split::Train)?,
            valid: parse_dataset(&dataset_path(dir, Split::Valid), Split::Valid)?,
            test: parse_dataset(&dataset_path(dir, Split::Test), Split::Test)?,
        })
    }

    pub fn split(&self, s: Split) -> &Dataset {
        match s {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

/// Model inputs for decoding a structure.
pub fn decoding_input(structure: &DataStructure, vocab: &Vocabulary) -> Result<(StructureInput, CopyMap)> {
    let input = StructureInput::new(structure, vocab)?;
    let values = structure.entities.iter().flat_map(|e| e.records.iter().map(|r| r.value.as_str()));
    Ok((input, CopyMap::new(values, vocab)))
}

/// Beam search over every example of a split.
pub fn generate_split(
    model: &Model,
    vocab: &Vocabulary,
    data: &Dataset,
    search: &SearchConfig,
) -> Result<Vec<Generation>> {
    data.examples
        .iter()
        .map(|ex| {
            let (input, map) = decoding_input(&ex.structure, vocab)?;
            beam_search(model, vocab, &input, &map, search)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct GenerationLine {
    tokens: Vec<String>,
    logprob: f64,
}

#[derive(Serialize, Deserialize)]
pub struct TraceLine {
    pub example: usize,
    pub steps: Vec<AttentionStep>,
}

pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    let mut out = String::new();
    for g in gens {
        out.push_str(&serde_json::to_string(&GenerationLine { tokens: g.tokens.clone(), logprob: g.logprob })?);
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_generations(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<GenerationLine>(l).map(|g| g.tokens).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn write_traces(path: &Path, gens: &[Generation]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    for (i, g) in gens.iter().enumerate() {
        let line = serde_json::to_string(&TraceLine { example: i, steps: g.attention.clone() })?;
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    Ok(())
}

pub fn read_traces(path: &Path) -> Result<Vec<TraceLine>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| serde_json::from_str(l).map_err(Error::from)).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(io_err(path))
}

/// Worst [`AttentionStep::simplex_error`] over all steps of `gens` and the
/// number of steps; `None` if any step is invalid.
pub fn simplex_summary(gens: &[Generation]) -> (Option<f64>, usize) {
    let steps = gens.iter().flat_map(|g| &g.attention);
    let worst = steps.clone().try_fold(0.0f64, |acc, s| s.simplex_error().map(|e| acc.max(e)));
    (worst, steps.count())
}

/// Everything one trained model produced.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: Scenario,
    pub seed: u64,
    pub valid_nll: f64,
    /// `ln |V|`, the per-token loss of a uniform generator.
    pub uniform_nll: f64,
    pub final_loss: f64,
    /// Worst simplex deviation over every decoding step of every test
    /// generation; `None` if some attention weight was negative or non-finite.
    pub simplex_error: Option<f64>,
    /// Decoding steps behind `simplex_error`.
    pub attention_steps: usize,
    pub report: MetricsReport,
    pub checkpoint: PathBuf,
    pub generations: PathBuf,
}

/// Trains on `corpus.train`, scores the valid loss, decodes `corpus.test`
/// and evaluates it. Writes everything under `dir`.
pub fn run_one(corpus: &Corpus, vocab: &Vocabulary, cfg: &RunConfig, dir: &Path) -> Result<RunResult> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    fs::write(dir.join("config.txt"), cfg.to_text()).map_err(io_err(dir))?;
    let outcome = train(&corpus.train, vocab, cfg, dir, None)?;
    let model = load_model(&outcome.final_checkpoint, cfg)?;
    let valid_nll = evaluate_loss(&model, &corpus.valid, vocab)?;
    let gens = generate_split(&model, vocab, &corpus.test, &cfg.search())?;
    let generations = dir.join("test.generations.jsonl");
    write_generations(&generations, &gens)?;
    let (simplex_error, attention_steps) = simplex_summary(&gens);
    let tokens: Vec<Vec<String>> = gens.into_iter().map(|g| g.tokens).collect();
    let rep = report(&corpus.test, &tokens)?;
    write_json(&dir.join("report.json"), &rep)?;
    Ok(RunResult {
        scenario: cfg.model.scenario,
        seed: cfg.train.seed,
        valid_nll,
        uniform_nll: (vocab.words.len() as f64).ln(),
        final_loss: outcome.losses.last().copied().unwrap_or(f64::NAN),
        simplex_error,
        attention_steps,
        report: rep,
        checkpoint: outcome.final_checkpoint,
        generations,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationResult {
    pub runs: Vec<RunResult>,
    /// Reference descriptions scored against themselves.
    pub gold: MetricsReport,
}

impl AblationResult {
    pub fn runs_of(&self, s: Scenario) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.scenario == s)
    }

    /// Mean of a report field over the seeds of one scenario.
    pub fn mean(&self, s: Scenario, f: impl Fn(&RunResult) -> f64) -> f64 {
        let v: Vec<f64> = self.runs_of(s).map(f).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// One row per scenario with mean ± std over seeds, plus the gold row.
    pub fn table(&self) -> String {
        let mut rows = vec![("gold".to_string(), report_row(&self.gold))];
        for s in Scenario::ALL {
            let reports: Vec<[f64; 7]> = self.runs_of(s).map(|r| r.report.values()).collect();
            if reports.is_empty() {
                continue;
            }
            let n = reports.len() as f64;
            let cells = (0..TABLE_COLUMNS.len())
                .map(|c| {
                    let mean = reports.iter().map(|r| r[c]).sum::<f64>() / n;
                    let var = reports.iter().map(|r| (r[c] - mean).powi(2)).sum::<f64>() / n;
                    format!("{mean:.2}±{:.2}", var.sqrt())
                })
                .collect();
            rows.push((s.to_string(), cells));
        }
        format_table(&rows)
    }
}

/// Trains and evaluates every scenario with every seed. The vocabulary is
/// built once from the training split. `progress` receives a line per run.
pub fn ablation(
    corpus: &Corpus,
    base: &RunConfig,
    scenarios: &[Scenario],
    seeds: &[u64],
    out_dir: &Path,
    mut progress: impl FnMut(&RunResult),
) -> Result<AblationResult> {
    let vocab = build_vocab(&corpus.train, base.min_freq)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    fs::write(out_dir.join("vocab.json"), vocab.to_json()).map_err(io_err(out_dir))?;
    let mut runs = Vec::new();
    for &scenario in scenarios {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model.scenario = scenario;
            cfg.train.seed = seed;
            let r = run_one(corpus, &vocab, &cfg, &out_dir.join(format!("{scenario}-seed{seed}")))?;
            progress(&r);
            runs.push(r);
        }
    }
    let gold_tokens: Vec<Vec<String>> = corpus.test.examples.iter().map(|e| e.description.tokens.clone()).collect();
    let gold = report(&corpus.test, &gold_tokens)?;
    let result = AblationResult { runs, gold };
    write_json(&out_dir.join("ablation.json"), &result)?;
    fs::write(out_dir.join("ablation.txt"), result.table()).map_err(io_err(out_dir))?;
    Ok(result)
}

mod manifest;
mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hierd2t::datamodel::parse_dataset;
use hierd2t::evaluation::{format_table, report, report_row};
use hierd2t::pipeline::{
    ablation, generate_split, read_generations, read_traces, write_generations, write_json, write_traces,
};
use hierd2t::toygen::{dataset_path, write_corpus};
use hierd2t::training::{evaluate_loss, load_model, train};
use hierd2t::{Corpus, MetricsReport, RunConfig, Scenario, Split, ToyGenConfig, Vocabulary};

use manifest::RunManifest;

#[derive(Parser)]
#[command(name = "hierd2t", version, about = "Hierarchical data-to-text generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic basketball corpus with relation sidecars.
    GenData(GenDataArgs),
    /// Train one model on a corpus.
    Train(TrainArgs),
    /// Decode a split with a trained model.
    Generate(GenerateArgs),
    /// Score generations against a split.
    Evaluate(EvaluateArgs),
    /// Write attention traces of one example as JSON and bar charts.
    DumpAttention(DumpArgs),
    /// Train and evaluate several scenarios and seeds; prints a comparison table.
    Ablation(AblationArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Desk-scale settings for the synthetic corpus.
    Toy,
    /// Full-size settings.
    Full,
}

/// Model and training settings: preset, then `--config`, then `--set`,
/// then the dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long, value_enum, default_value = "toy")]
    preset: Preset,
    /// File of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scenario: Option<Scenario>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match self.preset {
            Preset::Toy => RunConfig::toy(),
            Preset::Full => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            cfg.apply_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(s) = self.scenario {
            cfg.model.scenario = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 300)]
    valid: usize,
    #[arg(long, default_value_t = 300)]
    test: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory with `train.jsonl` and `valid.jsonl`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory of `train`.
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the averaged `final.bin` of the run.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    length_penalty: Option<f64>,
    #[arg(long)]
    finish_width: Option<usize>,
    /// Also write per-step attention of every example as JSONL.
    #[arg(long)]
    attention_trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Generations JSONL, optionally as `LABEL=PATH`; repeatable.
    #[arg(long = "generations", value_name = "[LABEL=]PATH")]
    generations: Vec<String>,
    /// Also score the reference descriptions against themselves.
    #[arg(long)]
    gold: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    /// Trace JSONL written by `generate --attention-trace`.
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    example: usize,
    /// Corpus used for entity and key labels.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblationArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "flat,hier-kv,hier-k")]
    scenarios: Vec<Scenario>,
    #[command(flatten)]
    config: ConfigArgs,
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = ToyGenConfig { train: a.train, valid: a.valid, test: a.test, seed: a.seed, ..ToyGenConfig::default() };
    cfg.validate()?;
    let mut m = RunManifest::new("gen-data", &a.out);
    m.seed = Some(a.seed);
    m.config = [("train", a.train), ("valid", a.valid), ("test", a.test)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    m.config.insert("generator".into(), serde_json::to_string(&cfg)?);
    m.write()?;
    let files = write_corpus(&cfg, &a.out)?;
    eprintln!("wrote {} files to {}", files.len(), a.out.display());
    m.finish()
}

#[derive(Serialize)]
struct TrainSummary {
    updates: usize,
    final_loss: Option<f64>,
    valid_nll: f64,
    uniform_nll: f64,
    final_checkpoint: PathBuf,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let cfg = a.config.resolve()?;
    let train_path = dataset_path(&a.data, Split::Train);
    let valid_path = dataset_path(&a.data, Split::Valid);
    let mut m = RunManifest::new("train", &a.out)
        .with_config_text(&cfg.to_text())
        .input("train", &train_path)?
        .input("valid", &valid_path)?;
    m.seed = Some(cfg.train.seed);
    m.scenario = Some(cfg.model.scenario.to_string());
    m.write()?;

    let train_set = parse_dataset(&train_path, Split::Train)?;
    let valid_set = parse_dataset(&valid_path, Split::Valid)?;
    let vocab = hierd2t::datamodel::build_vocab(&train_set, cfg.min_freq)?;
    fs::write(a.out.join("vocab.json"), vocab.to_json())?;
    fs::write(a.out.join("config.txt"), cfg.to_text())?;
    let total = cfg.train.total_updates;
    let mut report = |u: usize, lr: f64, loss: f64| {
        if (u + 1).is_multiple_of(100) || u + 1 == total {
            eprintln!("update {}/{total}  lr {lr:.6}  loss {loss:.4}", u + 1);
        }
    };
    let outcome = train(&train_set, &vocab, &cfg, &a.out, Some(&mut report))?;
    let model = load_model(&outcome.final_checkpoint, &cfg)?;
    let summary = TrainSummary {
        updates: total,
        final_loss: outcome.losses.last().copied(),
        valid_nll: evaluate_loss(&model, &valid_set, &vocab)?,
        uniform_nll: (vocab.words.len() as f64).ln(),
        final_checkpoint: outcome.final_checkpoint,
    };
    eprintln!("valid NLL {:.4} per token (uniform {:.4})", summary.valid_nll, summary.uniform_nll);
    write_json(&a.out.join("summary.json"), &summary)?;
    m.finish()
}

fn load_run(run: &Path) -> Result<(RunConfig, Vocabulary)> {
    let cfg_path = run.join("config.txt");
    let text = fs::read_to_string(&cfg_path).with_context(|| format!("cannot read {}", cfg_path.display()))?;
    let cfg = RunConfig::from_text(&text)?;
    let vocab_path = run.join("vocab.json");
    let vocab = Vocabulary::from_json(
        &fs::read_to_string(&vocab_path).with_context(|| format!("cannot read {}", vocab_path.display()))?,
    )?;
    Ok((cfg, vocab))
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let (mut cfg, vocab) = load_run(&a.run)?;
    if let Some(b) = a.beam {
        cfg.beam = b;
    }
    if let Some(l) = a.max_len {
        cfg.max_len = l;
    }
    if let Some(p) = a.length_penalty {
        cfg.length_penalty = p;
    }
    if let Some(w) = a.finish_width {
        cfg.finish_width = w;
    }
    cfg.validate()?;
    let checkpoint = a.checkpoint.clone().unwrap_or_else(|| a.run.join("final.bin"));
    if !checkpoint.is_file() {
        bail!("missing checkpoint {}", checkpoint.display());
    }
    let data_path = dataset_path(&a.data, a.split);
    let mut m = RunManifest::new("generate", &a.out)
        .with_config_text(&cfg.to_text())
        .input("checkpoint", &checkpoint)?
        .input("vocab", &a.run.join("vocab.json"))?
        .input("data", &data_path)?;
    m.seed = Some(cfg.train.seed);
    m.scenario = Some(cfg.model.scenario.to_string());
    m.write()?;

    let model = load_model(&checkpoint, &cfg)?;
    let data = parse_dataset(&data_path, a.split)?;
    let gens = generate_split(&model, &vocab, &data, &cfg.search())?;
    let out = a.out.join(format!("{}.generations.jsonl", a.split));
    write_generations(&out, &gens)?;
    if let Some(trace) = &a.attention_trace {
        write_traces(trace, &gens)?;
    }
    let finished = gens.iter().filter(|g| g.finished).count();
    eprintln!("decoded {} examples ({finished} finished) to {}", gens.len(), out.display());
    m.finish()
}

fn evaluate(a: &EvaluateArgs) -> Result<()> {
    if a.generations.is_empty() && !a.gold {
        bail!("nothing to evaluate: pass --generations or --gold");
    }
    let data_path = dataset_path(&a.data, a.split);
    let mut m = RunManifest::new("evaluate", &a.out).input("data", &data_path)?;
    let mut inputs = Vec::new();
    for entry in &a.generations {
        let (label, path) = match entry.split_once('=') {
            Some((l, p)) => (l.to_string(), PathBuf::from(p)),
            None => {
                let p = PathBuf::from(entry);
                let label = p
                    .parent()
                    .and_then(Path::file_name)
                    .map_or_else(|| entry.clone(), |n| n.to_string_lossy().into_owned());
                (label, p)
            }
        };
        m = m.input(&format!("generations:{label}"), &path)?;
        inputs.push((label, path));
    }
    m.write()?;

    let data = parse_dataset(&data_path, a.split)?;
    let mut reports: Vec<(String, MetricsReport)> = Vec::new();
    if a.gold {
        let gold: Vec<Vec<String>> = data.examples.iter().map(|e| e.description.tokens.clone()).collect();
        reports.push(("gold".into(), report(&data, &gold)?));
    }
    for (label, path) in inputs {
        let gens = read_generations(&path)?;
        reports.push((label, report(&data, &gens)?));
    }
    let rows: Vec<(String, Vec<String>)> = reports.iter().map(|(l, r)| (l.clone(), report_row(r))).collect();
    let table = format_table(&rows);
    print!("{table}");
    fs::write(a.out.join("table.txt"), &table)?;
    let map: std::collections::BTreeMap<&str, &MetricsReport> = reports.iter().map(|(l, r)| (l.as_str(), r)).collect();
    write_json(&a.out.join("report.json"), &map)?;
    m.finish()
}

#[derive(Serialize)]
struct StepDump<'a> {
    step: usize,
    token: Option<&'a str>,
    chosen_entity: usize,
    alpha: &'a [f64],
    beta: &'a [Vec<f64>],
    image: String,
}

#[derive(Serialize)]
struct ExampleDump<'a> {
    example: usize,
    entities: Vec<String>,
    keys: Vec<Vec<String>>,
    steps: Vec<StepDump<'a>>,
}

fn dump_attention(a: &DumpArgs) -> Result<()> {
    let mut m = RunManifest::new("dump-attention", &a.out).input("trace", &a.trace)?;
    m.config.insert("example".into(), a.example.to_string());
    m.write()?;
    let traces = read_traces(&a.trace)?;
    let trace = traces
        .iter()
        .find(|t| t.example == a.example)
        .with_context(|| format!("example {} is not in {}", a.example, a.trace.display()))?;
    let (entities, keys) = match &a.data {
        Some(dir) => {
            let data = parse_dataset(&dataset_path(dir, a.split), a.split)?;
            let ex = data
                .examples
                .get(a.example)
                .with_context(|| format!("example {} is not in the {} split", a.example, a.split))?;
            let s = &ex.structure;
            (
                s.entities.iter().map(|e| e.name().unwrap_or("?").to_string()).collect(),
                s.entities.iter().map(|e| e.records.iter().map(|r| r.key.clone()).collect()).collect(),
            )
        }
        None => (Vec::new(), Vec::new()),
    };
    let generations = a.trace.with_file_name(format!("{}.generations.jsonl", a.split));
    let tokens = read_generations(&generations).ok().and_then(|g| g.into_iter().nth(a.example));
    let mut steps = Vec::with_capacity(trace.steps.len());
    for (i, step) in trace.steps.iter().enumerate() {
        let image = format!("example{}_step{i:03}.png", a.example);
        plot::save_step(step, &a.out.join(&image))?;
        steps.push(StepDump {
            step: i,
            token: tokens.as_ref().and_then(|t| t.get(i)).map(String::as_str),
            chosen_entity: plot::argmax(&step.alpha),
            alpha: &step.alpha,
            beta: &step.beta,
            image,
        });
    }
    let n = steps.len();
    write_json(
        &a.out.join(format!("example{}.json", a.example)),
        &ExampleDump { example: a.example, entities, keys, steps },
    )?;
    eprintln!("wrote {n} step charts to {}", a.out.display());
    m.finish()
}

fn ablation_cmd(a: &AblationArgs) -> Result<()> {
    if a.seeds.is_empty() || a.scenarios.is_empty() {
        bail!("need at least one seed and one scenario");
    }
    let base = a.config.resolve()?;
    let mut m = RunManifest::new("ablation", &a.out).with_config_text(&base.to_text()).input("data", &a.data)?;
    m.config.insert("seeds".into(), format!("{:?}", a.seeds));
    m.config.insert("scenarios".into(), a.scenarios.iter().map(Scenario::to_string).collect::<Vec<_>>().join(","));
    m.write()?;
    let corpus = Corpus::load(&a.data)?;
    let result = ablation(&corpus, &base, &a.scenarios, &a.seeds, &a.out, |r| {
        eprintln!(
            "{} seed {}: valid NLL {:.3}, BLEU {:.2}, RG-P {:.2}, CS-F1 {:.2}, CO {:.2}",
            r.scenario, r.seed, r.valid_nll, r.report.bleu, r.report.rg_p, r.report.cs_f1, r.report.co
        );
    })?;
    print!("{}", result.table());
    m.finish()
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate(a),
        Command::DumpAttention(a) => dump_attention(a),
        Command::Ablation(a) => ablation_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            eprintln!("{}", text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

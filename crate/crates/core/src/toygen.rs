//! Synthetic box-score corpus with templated descriptions whose relations are
//! known exactly.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{align_copies, DataStructure, Dataset, Description, Entity, EntityKind, Example, Record, Split};
use crate::error::{io_err, Error, Result};
use crate::evaluation::{extract_relations_with, RelationTuple};
use crate::training::rng_stream;

pub const TEAM_KEYS: [&str; 4] = ["PTS", "WINS", "LOSSES", "QTR1"];
pub const PLAYER_KEYS: [&str; 8] = ["PTS", "REB", "AST", "STL", "BLK", "MIN", "FG", "FT"];

const TEAM_NAMES: [&str; 16] = [
    "Hawks",
    "Bulls",
    "Celtics",
    "Nets",
    "Hornets",
    "Cavaliers",
    "Pistons",
    "Pacers",
    "Heat",
    "Bucks",
    "Knicks",
    "Magic",
    "Raptors",
    "Wizards",
    "Lakers",
    "Suns",
];
const FIRST_NAMES: [&str; 10] = ["Jeff", "Al", "Kyle", "Dennis", "Paul", "Isaiah", "Kent", "Mike", "Tony", "Marcus"];
const LAST_NAMES: [&str; 15] = [
    "Teague", "Horford", "Korver", "Schroder", "Millsap", "Thomas", "Bazemore", "Scott", "Allen", "Smart", "Green",
    "Parker", "Bradley", "Young", "Brown",
];
const DAYS: [&str; 3] = ["Monday", "Wednesday", "Saturday"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyGenConfig {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    /// Players per example; every example also has two teams.
    pub players: RangeInclusive<usize>,
    /// Inclusive value range per key; team and player keys are separate.
    pub team_values: BTreeMap<String, (u32, u32)>,
    pub player_values: BTreeMap<String, (u32, u32)>,
    /// Description length bounds in tokens.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Extraction window the generator keeps its mentions consistent with.
    pub window: usize,
    pub seed: u64,
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        let ranges = |pairs: &[(&str, (u32, u32))]| pairs.iter().map(|(k, r)| (k.to_string(), *r)).collect();
        Self {
            train: 2000,
            valid: 300,
            test: 300,
            players: 2..=6,
            team_values: ranges(&[("PTS", (80, 125)), ("WINS", (5, 55)), ("LOSSES", (5, 55)), ("QTR1", (15, 38))]),
            player_values: ranges(&[
                ("PTS", (2, 38)),
                ("REB", (0, 16)),
                ("AST", (0, 13)),
                ("STL", (0, 5)),
                ("BLK", (0, 5)),
                ("MIN", (12, 42)),
                ("FG", (1, 15)),
                ("FT", (0, 12)),
            ]),
            min_tokens: 30,
            max_tokens: 80,
            window: crate::evaluation::DEFAULT_WINDOW,
            seed: 1,
        }
    }
}

impl ToyGenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.players.is_empty() || *self.players.start() == 0 {
            return Err(Error::Config("player range must be non-empty and start at 1 or more".into()));
        }
        if *self.players.end() > FIRST_NAMES.len() * LAST_NAMES.len() {
            return Err(Error::Config("too many players for the name pool".into()));
        }
        for (keys, ranges) in [(&TEAM_KEYS[..], &self.team_values), (&PLAYER_KEYS[..], &self.player_values)] {
            for k in keys {
                match ranges.get(*k) {
                    Some((lo, hi)) if lo <= hi => {}
                    Some(_) => return Err(Error::Config(format!("empty value range for {k}"))),
                    None => return Err(Error::Config(format!("missing value range for {k}"))),
                }
            }
        }
        if self.min_tokens > self.max_tokens || self.max_tokens < 20 {
            return Err(Error::Config("description length bounds are inconsistent".into()));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }
}

/// One generated example and the relations its description mentions.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyExample {
    pub example: Example,
    pub relations: Vec<RelationTuple>,
}

#[derive(Serialize, Deserialize)]
struct SidecarLine {
    relations: Vec<RelationTuple>,
}

fn value(e: &Entity, key: &str) -> String {
    e.records.iter().find(|r| r.key == key).map(|r| r.value.clone()).unwrap_or_default()
}

fn name(e: &Entity) -> String {
    e.name().unwrap_or_default().to_string()
}

/// Text pieces: literal words or a mention of `(entity, key)`.
enum Piece {
    Word(&'static str),
    Name(usize),
    Value(usize, &'static str),
    Text(String),
}

struct Clause {
    pieces: Vec<Piece>,
}

impl Clause {
    fn render(&self, ents: &[Entity]) -> (Vec<String>, Vec<RelationTuple>) {
        let mut toks = Vec::new();
        let mut rels = Vec::new();
        for p in &self.pieces {
            match p {
                Piece::Word(w) => toks.push(w.to_string()),
                Piece::Text(w) => toks.push(w.clone()),
                Piece::Name(i) => toks.push(name(&ents[*i])),
                Piece::Value(i, k) => {
                    let v = value(&ents[*i], k);
                    rels.push(RelationTuple::new(name(&ents[*i]), v.clone(), *k));
                    toks.push(v);
                }
            }
        }
        (toks, rels)
    }
}

fn words(s: &'static str) -> impl Iterator<Item = Piece> {
    s.split(' ').filter(|w| !w.is_empty()).map(Piece::Word)
}

macro_rules! clause {
    ($($p:expr),* $(,)?) => {{
        let mut pieces = Vec::new();
        $(pieces.extend($p);)*
        Clause { pieces }
    }};
}

fn n(i: usize) -> Option<Piece> {
    Some(Piece::Name(i))
}

fn v(i: usize, k: &'static str) -> Option<Piece> {
    Some(Piece::Value(i, k))
}

fn result_clause<R: Rng>(ents: &[Entity], rng: &mut R) -> Clause {
    let (a, b) = (0, 1);
    let pa: u32 = value(&ents[a], "PTS").parse().unwrap_or(0);
    let pb: u32 = value(&ents[b], "PTS").parse().unwrap_or(0);
    let (w, l) = if pa >= pb { (a, b) } else { (b, a) };
    let verb = if pa == pb { "tied" } else { ["defeated", "beat", "edged"][rng.random_range(0..3)] };
    let day = Piece::Text(DAYS.choose(rng).expect("non-empty").to_string());
    clause!(
        words("the"),
        n(w),
        Some(Piece::Text(verb.into())),
        words("the"),
        n(l),
        v(w, "PTS"),
        words("-"),
        v(l, "PTS"),
        words("on"),
        Some(day),
        words(".")
    )
}

fn team_clauses(t: usize) -> Vec<Clause> {
    vec![
        clause!(
            words("the"),
            n(t),
            words("are now"),
            v(t, "WINS"),
            words("-"),
            v(t, "LOSSES"),
            words("on the season .")
        ),
        clause!(words("the"), n(t), words("scored"), v(t, "QTR1"), words("points in the first quarter .")),
    ]
}

fn player_clauses<R: Rng>(p: usize, rng: &mut R) -> Vec<Clause> {
    let mut out = vec![
        clause!(n(p), words("scored"), v(p, "PTS"), words("points")),
        clause!(n(p), words("grabbed"), v(p, "REB"), words("rebounds and dished"), v(p, "AST"), words("assists")),
        clause!(n(p), words("recorded"), v(p, "STL"), words("steals and"), v(p, "BLK"), words("blocks")),
        clause!(n(p), words("went"), v(p, "FG"), words("from the field and"), v(p, "FT"), words("from the line")),
        clause!(n(p), words("played"), v(p, "MIN"), words("minutes")),
        clause!(
            n(p),
            words("finished with"),
            v(p, "PTS"),
            words("points ,"),
            v(p, "REB"),
            words("rebounds and"),
            v(p, "AST"),
            words("assists")
        ),
    ];
    for c in &mut out {
        if rng.random_bool(0.5) {
            c.pieces.extend(words("off the bench"));
        }
        c.pieces.push(Piece::Word("."));
    }
    out
}

fn draw_structure<R: Rng>(cfg: &ToyGenConfig, rng: &mut R) -> DataStructure {
    let teams: Vec<&str> = TEAM_NAMES.choose_multiple(rng, 2).copied().collect();
    let n_players = rng.random_range(cfg.players.clone());
    let mut names = HashSet::new();
    while names.len() < n_players {
        let f = FIRST_NAMES.choose(rng).expect("non-empty");
        let l = LAST_NAMES.choose(rng).expect("non-empty");
        names.insert(format!("{f}_{l}"));
    }
    let mut names: Vec<String> = names.into_iter().collect();
    names.sort();
    names.shuffle(rng);
    let draw = |keys: &[&str], ranges: &BTreeMap<String, (u32, u32)>, rng: &mut R| -> Vec<Record> {
        keys.iter()
            .map(|k| {
                let (lo, hi) = ranges[*k];
                Record::new(*k, rng.random_range(lo..=hi).to_string())
            })
            .collect()
    };
    let mut entities = Vec::new();
    for t in teams {
        let mut records = vec![Record::new("NAME", t)];
        records.extend(draw(&TEAM_KEYS, &cfg.team_values, rng));
        entities.push(Entity { kind: EntityKind::Team, records });
    }
    for p in names {
        let mut records = vec![Record::new("NAME", p)];
        records.extend(draw(&PLAYER_KEYS, &cfg.player_values, rng));
        entities.push(Entity { kind: EntityKind::Player, records });
    }
    DataStructure { entities }
}

/// Appends clauses in random order while the extractor still reproduces
/// exactly the intended relations; clauses that would introduce an
/// unintended or repeated relation are skipped.
fn draw_description<R: Rng>(
    cfg: &ToyGenConfig,
    structure: &DataStructure,
    rng: &mut R,
) -> Option<(Vec<String>, Vec<RelationTuple>)> {
    let ents = &structure.entities;
    let target = rng.random_range(cfg.min_tokens.max(1)..=cfg.max_tokens);
    let mut tokens = Vec::new();
    let mut rels: Vec<RelationTuple> = Vec::new();
    let mut pool = vec![result_clause(ents, rng)];
    let mut rest: Vec<Clause> = Vec::new();
    for t in 0..2 {
        rest.extend(team_clauses(t));
    }
    for p in 2..ents.len() {
        let mut cs = player_clauses(p, rng);
        cs.shuffle(rng);
        // at most two clauses per player keeps player order varied
        rest.extend(cs.into_iter().take(2));
    }
    rest.shuffle(rng);
    pool.extend(rest);
    for clause in pool {
        if tokens.len() >= target {
            break;
        }
        let (toks, new_rels) = clause.render(ents);
        if tokens.len() + toks.len() > cfg.max_tokens {
            continue;
        }
        let mut expected = rels.clone();
        let mut seen: HashSet<RelationTuple> = rels.iter().cloned().collect();
        if new_rels.iter().any(|r| !seen.insert(r.clone())) {
            continue;
        }
        expected.extend(new_rels);
        let mut candidate = tokens.clone();
        candidate.extend(toks);
        if extract_relations_with(&candidate, structure, cfg.window) == expected {
            tokens = candidate;
            rels = expected;
        }
    }
    (tokens.len() >= cfg.min_tokens && !rels.is_empty()).then_some((tokens, rels))
}

/// Draws one example; retries until the description fits the length bounds.
pub fn generate_example<R: Rng>(cfg: &ToyGenConfig, rng: &mut R) -> ToyExample {
    loop {
        let structure = draw_structure(cfg, rng);
        if let Some((tokens, relations)) = draw_description(cfg, &structure, rng) {
            let mut example = Example::new(structure, Description { tokens });
            align_copies(&mut example);
            return ToyExample { example, relations };
        }
    }
}

/// Generates all three splits from one seeded stream; examples are unique
/// across the whole corpus, so the splits are disjoint.
pub fn generate_corpus(cfg: &ToyGenConfig) -> Result<Vec<(Split, Vec<ToyExample>)>> {
    cfg.validate()?;
    let mut rng = rng_stream(cfg.seed, 7);
    let mut seen = HashSet::new();
    let mut all = Vec::new();
    let total = cfg.train + cfg.valid + cfg.test;
    while all.len() < total {
        let ex = generate_example(cfg, &mut rng);
        let key = (ex.example.structure.clone(), ex.example.description.tokens.clone());
        if seen.insert(format!("{key:?}")) {
            all.push(ex);
        }
    }
    all.shuffle(&mut rng);
    let mut out = Vec::new();
    let mut rest = all.into_iter();
    for split in Split::ALL {
        out.push((split, rest.by_ref().take(cfg.count(split)).collect()));
    }
    Ok(out)
}

pub fn dataset_of(split: Split, examples: &[ToyExample]) -> Dataset {
    Dataset { examples: examples.iter().map(|e| e.example.clone()).collect(), split }
}

pub fn sidecar_jsonl(examples: &[ToyExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&SidecarLine { relations: e.relations.clone() })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn read_sidecar(path: &Path) -> Result<Vec<Vec<RelationTuple>>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<SidecarLine>(l).map(|s| s.relations).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn dataset_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

pub fn sidecar_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.relations.jsonl"))
}

/// Writes `<split>.jsonl` and `<split>.relations.jsonl` for every split.
pub fn write_corpus(cfg: &ToyGenConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for (split, examples) in generate_corpus(cfg)? {
        let data = dataset_path(dir, split);
        dataset_of(split, &examples).write(&data)?;
        let side = sidecar_path(dir, split);
        fs::write(&side, sidecar_jsonl(&examples)?).map_err(io_err(&side))?;
        written.extend([data, side]);
    }
    Ok(written)
}

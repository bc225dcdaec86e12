//! Tables of entities/records, descriptions, JSONL ingestion, vocabularies and
//! copy-supervision alignment.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

/// Name of the key whose value identifies an entity in text.
pub const NAME_KEY: &str = "NAME";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Team,
    Player,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub key: String,
    pub value: String,
}

impl Record {
    pub fn new(key: impl Into<String>, value: impl Into<String>) -> Self {
        Self { key: key.into(), value: value.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entity {
    pub kind: EntityKind,
    pub records: Vec<Record>,
}

impl Entity {
    /// Value of the `NAME` record, if any.
    pub fn name(&self) -> Option<&str> {
        self.records.iter().find(|r| r.key == NAME_KEY).map(|r| r.value.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataStructure {
    pub entities: Vec<Entity>,
}

impl DataStructure {
    pub fn num_records(&self) -> usize {
        self.entities.iter().map(|e| e.records.len()).sum()
    }

    /// Start offset of every entity's records in entity-major order, plus the
    /// total count as the final element.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.entities.len() + 1);
        let mut acc = 0;
        out.push(0);
        for e in &self.entities {
            acc += e.records.len();
            out.push(acc);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.is_empty() {
            return Err(Error::InvalidData("data structure has no entities".into()));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.records.is_empty() {
                return Err(Error::InvalidData(format!("entity {i} has no records")));
            }
            let mut seen = HashSet::new();
            for r in &e.records {
                if !seen.insert(r.key.as_str()) {
                    return Err(Error::InvalidData(format!("entity {i} has duplicate key `{}`", r.key)));
                }
                if r.key.is_empty() || !r.key.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
                {
                    return Err(Error::InvalidData(format!("invalid key `{}`", r.key)));
                }
                if r.value.is_empty() || r.value.split_whitespace().count() != 1 {
                    return Err(Error::InvalidData(format!(
                        "value of key `{}` in entity {i} must be a single non-empty token",
                        r.key
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Reference text, pre-tokenized. The end-of-sequence marker is not stored;
/// the decoder appends it as its final target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Description {
    pub tokens: Vec<String>,
}

impl Description {
    pub fn parse(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::InvalidData("empty description".into()));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Index of one record: (entity, record within entity).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RecordRef {
    pub entity: usize,
    pub record: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub structure: DataStructure,
    pub description: Description,
    /// One slot per description token; empty until [`align_copies`] runs.
    pub copy_alignment: Vec<Option<RecordRef>>,
}

impl Example {
    pub fn new(structure: DataStructure, description: Description) -> Self {
        Self { structure, description, copy_alignment: Vec::new() }
    }

    pub fn is_aligned(&self) -> bool {
        self.copy_alignment.len() == self.description.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub split: Split,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonLine {
    entities: Vec<Entity>,
    description: String,
}

impl Dataset {
    /// Sorted set of all record keys.
    pub fn key_inventory(&self) -> BTreeSet<String> {
        self.examples
            .iter()
            .flat_map(|ex| ex.structure.entities.iter())
            .flat_map(|e| e.records.iter().map(|r| r.key.clone()))
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for ex in &self.examples {
            let line = JsonLine { entities: ex.structure.entities.clone(), description: ex.description.text() };
            out.push_str(&serde_json::to_string(&line).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(io_err(path))
    }

    /// Parses JSONL text; `source` names the input in error messages.
    pub fn from_jsonl(text: &str, split: Split, source: &str) -> Result<Self> {
        let mut examples = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Parse { path: source.to_string(), line: n + 1, message };
            let parsed: JsonLine = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            let structure = DataStructure { entities: parsed.entities };
            structure.validate().map_err(|e| err(e.to_string()))?;
            let description = Description::parse(&parsed.description).map_err(|e| err(e.to_string()))?;
            examples.push(Example::new(structure, description));
        }
        if examples.is_empty() {
            return Err(Error::Parse { path: source.to_string(), line: 0, message: "dataset is empty".into() });
        }
        Ok(Self { examples, split })
    }
}

/// Reads a JSONL dataset file and computes copy alignments.
pub fn parse_dataset(path: &Path, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut ds = Dataset::from_jsonl(&text, split, &path.display().to_string())?;
    for ex in &mut ds.examples {
        align_copies(ex);
    }
    Ok(ds)
}

/// Points every description token that equals some record value at the
/// first such record (first entity, then first record, in file order).
/// Idempotent.
pub fn align_copies(example: &mut Example) {
    let mut first: HashMap<&str, RecordRef> = HashMap::new();
    for (i, e) in example.structure.entities.iter().enumerate() {
        for (j, r) in e.records.iter().enumerate() {
            first.entry(r.value.as_str()).or_insert(RecordRef { entity: i, record: j });
        }
    }
    example.copy_alignment = example.description.tokens.iter().map(|t| first.get(t.as_str()).copied()).collect();
}

/// Entity-major concatenation of all records, as fed to the flat encoder.
pub fn linearize(structure: &DataStructure) -> Vec<Record> {
    structure.entities.iter().flat_map(|e| e.records.iter().cloned()).collect()
}

/// A string ↔ id bijection.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lexicon {
    id_to_word: Vec<String>,
    #[serde(skip)]
    word_to_id: HashMap<String, usize>,
}

impl Lexicon {
    fn from_words(words: Vec<String>) -> Self {
        let word_to_id = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { id_to_word: words, word_to_id }
    }

    fn rebuild_index(&mut self) -> Result<()> {
        self.word_to_id = self.id_to_word.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if self.word_to_id.len() != self.id_to_word.len() {
            return Err(Error::InvalidData("vocabulary contains duplicates".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_word.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.word_to_id.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.id_to_word.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }
}

/// Description words, record values and record keys.
///
/// Reserved ids: words `PAD=0 UNK=1 BOS=2 EOS=3`; values `PAD=0 UNK=1`;
/// keys `ENT=0` followed by the key inventory in sorted order. Key ids form
/// their own id space.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub words: Lexicon,
    pub values: Lexicon,
    pub keys: Lexicon,
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const ENT: &str = "<ent>";

impl Vocabulary {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;
    pub const BOS_ID: usize = 2;
    pub const EOS_ID: usize = 3;
    pub const ENT_KEY_ID: usize = 0;

    pub fn word_id(&self, w: &str) -> usize {
        self.words.id(w).unwrap_or(Self::UNK_ID)
    }

    pub fn value_id(&self, v: &str) -> usize {
        self.values.id(v).unwrap_or(Self::UNK_ID)
    }

    pub fn key_id(&self, k: &str) -> Result<usize> {
        self.keys.id(k).ok_or_else(|| Error::InvalidData(format!("key `{k}` is not in the key inventory")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let mut v: Self = serde_json::from_str(text)?;
        v.words.rebuild_index()?;
        v.values.rebuild_index()?;
        v.keys.rebuild_index()?;
        Ok(v)
    }
}

/// Builds the vocabularies from a training split. Description words seen fewer
/// than `min_freq` times map to UNK; every key and every value is kept.
pub fn build_vocab(train: &Dataset, min_freq: usize) -> Result<Vocabulary> {
    if train.split != Split::Train {
        return Err(Error::InvalidData(format!("vocabulary must be built from the train split, got {}", train.split)));
    }
    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    let mut values = BTreeSet::new();
    for ex in &train.examples {
        for t in &ex.description.tokens {
            *word_freq.entry(t.as_str()).or_default() += 1;
        }
        for e in &ex.structure.entities {
            for r in &e.records {
                values.insert(r.value.as_str());
            }
        }
    }
    let reserved = [PAD, UNK, BOS, EOS];
    let mut words: Vec<String> = reserved.iter().map(|s| s.to_string()).collect();
    // most frequent first, ties alphabetical
    let mut ranked: Vec<(&str, usize)> =
        word_freq.into_iter().filter(|(w, c)| *c >= min_freq.max(1) && !reserved.contains(w)).collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    words.extend(ranked.into_iter().map(|(w, _)| w.to_string()));

    let mut value_list: Vec<String> = vec![PAD.to_string(), UNK.to_string()];
    value_list.extend(values.into_iter().filter(|v| *v != PAD && *v != UNK).map(str::to_string));

    let mut keys = vec![ENT.to_string()];
    keys.extend(train.key_inventory());

    Ok(Vocabulary {
        words: Lexicon::from_words(words),
        values: Lexicon::from_words(value_list),
        keys: Lexicon::from_words(keys),
    })
}

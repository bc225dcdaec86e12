use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::datamodel::DataStructure;

/// Tokens after an entity mention that may carry its values.
pub const DEFAULT_WINDOW: usize = 20;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTuple {
    pub entity: String,
    pub value: String,
    pub key: String,
}

impl RelationTuple {
    pub fn new(entity: impl Into<String>, value: impl Into<String>, key: impl Into<String>) -> Self {
        Self { entity: entity.into(), value: value.into(), key: key.into() }
    }
}

/// Per mentionable entity: name and value → first key in sorted key order.
fn value_index(structure: &DataStructure) -> Vec<(&str, HashMap<&str, &str>)> {
    structure
        .entities
        .iter()
        .filter_map(|e| {
            let name = e.name()?;
            let mut by_key: BTreeMap<&str, &str> = BTreeMap::new();
            for r in &e.records {
                by_key.insert(r.key.as_str(), r.value.as_str());
            }
            let mut values = HashMap::new();
            for (k, v) in by_key {
                values.entry(v).or_insert(k);
            }
            Some((name, values))
        })
        .collect()
}

/// Rule-based relation extractor.
///
/// A token equal to an entity's name opens a window over the next `window`
/// tokens; any later token in the window equal to one of that entity's values
/// yields `(entity, value, key)`. Name tokens are never read as values. When
/// several keys share the value, the alphabetically first key wins. Repeated
/// triples are dropped, keeping first-occurrence order.
pub fn extract_relations_with<T: AsRef<str>>(
    tokens: &[T],
    structure: &DataStructure,
    window: usize,
) -> Vec<RelationTuple> {
    let index = value_index(structure);
    let names: HashSet<&str> = index.iter().map(|(n, _)| *n).collect();
    // window end (exclusive) per entity, in order of first mention
    let mut open: Vec<(usize, usize)> = Vec::new();
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (pos, tok) in tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if names.contains(tok) {
            for (e, (name, _)) in index.iter().enumerate() {
                if *name == tok {
                    match open.iter_mut().find(|(oe, _)| *oe == e) {
                        Some(slot) => slot.1 = pos + 1 + window,
                        None => open.push((e, pos + 1 + window)),
                    }
                }
            }
            continue;
        }
        for &(e, end) in &open {
            if pos >= end {
                continue;
            }
            let (name, values) = &index[e];
            if let Some(key) = values.get(tok) {
                let t = RelationTuple::new(*name, tok, *key);
                if seen.insert(t.clone()) {
                    out.push(t);
                }
            }
        }
    }
    out
}

pub fn extract_relations<T: AsRef<str>>(tokens: &[T], structure: &DataStructure) -> Vec<RelationTuple> {
    extract_relations_with(tokens, structure, DEFAULT_WINDOW)
}

/// Whether some entity with this name has the record `(key, value)`.
pub fn is_factual(t: &RelationTuple, structure: &DataStructure) -> bool {
    structure
        .entities
        .iter()
        .any(|e| e.name() == Some(t.entity.as_str()) && e.records.iter().any(|r| r.key == t.key && r.value == t.value))
}

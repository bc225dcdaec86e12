use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of one command invocation, written to its output directory before
/// any long-running work and completed with output digests at the end.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub tool_version: String,
    /// Resolved settings after defaults, config file and flag overrides.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub scenario: Option<String>,
    pub inputs: BTreeMap<String, PathBuf>,
    pub output_dir: PathBuf,
    /// SHA-256 of every input file, keyed by path.
    pub input_digests: BTreeMap<PathBuf, String>,
    /// SHA-256 of every file written under `output_dir`; empty until the
    /// command finishes.
    pub output_digests: BTreeMap<PathBuf, String>,
    pub complete: bool,
}

impl RunManifest {
    pub fn new(command: &str, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: BTreeMap::new(),
            seed: None,
            scenario: None,
            inputs: BTreeMap::new(),
            output_dir: output_dir.to_path_buf(),
            input_digests: BTreeMap::new(),
            output_digests: BTreeMap::new(),
            complete: false,
        }
    }

    /// Parses `key = value` lines into the config map.
    pub fn with_config_text(mut self, text: &str) -> Self {
        for line in text.lines() {
            if let Some((k, v)) = line.split_once('=') {
                self.config.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        self
    }

    /// Adds an input file or every file under an input directory.
    pub fn input(mut self, role: &str, path: &Path) -> Result<Self> {
        self.inputs.insert(role.to_string(), path.to_path_buf());
        for f in list_files(path)? {
            self.input_digests.insert(f.clone(), digest_file(&f)?);
        }
        Ok(self)
    }

    fn path(&self) -> PathBuf {
        self.output_dir.join(MANIFEST_FILE)
    }

    pub fn write(&self) -> Result<()> {
        fs::create_dir_all(&self.output_dir).with_context(|| format!("cannot create {}", self.output_dir.display()))?;
        let path = self.path();
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
    }

    /// Digests every output file except the manifest and marks it complete.
    pub fn finish(mut self) -> Result<()> {
        let own = self.path();
        self.output_digests.clear();
        for f in list_files(&self.output_dir)? {
            if f != own {
                let rel = f.strip_prefix(&self.output_dir).unwrap_or(&f).to_path_buf();
                self.output_digests.insert(rel, digest_file(&f)?);
            }
        }
        self.complete = true;
        self.write()
    }
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn list_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = fs::read_dir(&dir).with_context(|| format!("cannot list {}", dir.display()))?;
        for e in entries {
            let p = e?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

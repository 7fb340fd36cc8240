//! Run records: every command leaves a `run.json` next to its artifacts
//! naming the command, the fully resolved config, and content hashes of
//! everything it read. Reruns with the same inputs produce the same
//! record, so no wall-clock or hostname fields belong here.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use zsqd::config::RunConfig;
use zsqd::{Error, Result};

pub fn sha256_bytes(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    format!("sha256:{:x}", h.finalize())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("hashing {}: {e}", path.display())))?;
    Ok(sha256_bytes(&bytes))
}

/// Tree hash: sha256 over "relpath hash\n" lines for every file under
/// `dir`, sorted by path. Stable across platforms for identical content.
pub fn sha256_dir(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut listing = String::new();
    for rel in &files {
        let h = sha256_file(&dir.join(rel))?;
        listing.push_str(rel);
        listing.push(' ');
        listing.push_str(&h);
        listing.push('\n');
    }
    Ok(sha256_bytes(listing.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let entries = fs::read_dir(dir)
        .map_err(|e| Error::Config(format!("reading {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path
                .strip_prefix(root)
                .expect("entry under root")
                .to_string_lossy()
                .replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

#[derive(Serialize)]
pub struct RunRecord<'a> {
    pub command: &'a str,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config: &'a RunConfig,
    /// command-specific knobs that live outside the config file
    pub params: BTreeMap<String, String>,
    /// input name -> content hash
    pub inputs: BTreeMap<String, String>,
}

impl<'a> RunRecord<'a> {
    pub fn new(command: &'a str, config: &'a RunConfig) -> Self {
        RunRecord {
            command,
            argv: std::env::args().skip(1).collect(),
            seed: config.seed,
            config,
            params: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        self.inputs.insert(name.to_string(), sha256_file(path)?);
        Ok(self)
    }

    pub fn input_dir(&mut self, name: &str, dir: &Path) -> Result<&mut Self> {
        self.inputs.insert(name.to_string(), sha256_dir(dir)?);
        Ok(self)
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(out_dir.join("run.json"), json)?;
        Ok(())
    }
}

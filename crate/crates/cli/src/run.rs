//! Run context shared by every command: configuration, provenance and the
//! output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use lco_core::config::RunConfig;
use lco_core::provenance::{content_hash, Provenance};
use lco_core::Error;
use serde_json::{json, Value};

use crate::Common;

/// A command failure with its process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn validation(message: impl Into<String>) -> Self {
        Self { code: 1, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self { code: if e.is_io() { 2 } else { 1 }, message: e.to_string() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = Result<T, Failure>;

/// Prefixes an error with the file it concerns.
pub fn at<T>(path: &Path, r: lco_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| {
        let f = Failure::from(e);
        Failure { message: format!("{}: {}", path.display(), f.message), ..f }
    })
}

pub struct Run {
    pub cfg: RunConfig,
    pub seed: u64,
    out_dir: PathBuf,
    prov: Provenance,
    files: Vec<(String, Vec<u8>)>,
}

impl Run {
    pub fn start(command: &str, common: &Common) -> CliResult<Self> {
        let (mut cfg, config_bytes) = match &common.config {
            Some(path) => {
                let bytes = read(path)?;
                let text = String::from_utf8(bytes.clone())
                    .map_err(|_| Failure::validation(format!("{}: config is not UTF-8", path.display())))?;
                (at(path, RunConfig::parse(&text))?, Some((path, bytes)))
            }
            None => (RunConfig::default(), None),
        };
        for kv in &common.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::validation(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        let mut prov = Provenance::new(command, cfg.resolved().clone(), vec![common.seed]);
        if let Some((path, bytes)) = config_bytes {
            prov.add_input(&format!("config:{}", path.display()), &bytes);
        }
        Ok(Self { cfg, seed: common.seed, out_dir: common.out_dir.clone(), prov, files: Vec::new() })
    }

    pub fn set_seeds(&mut self, seeds: Vec<u64>) {
        self.prov.seeds = seeds;
    }

    /// Reads an input file and records its content hash.
    pub fn input(&mut self, role: &str, path: &Path) -> CliResult<Vec<u8>> {
        let bytes = read(path)?;
        self.prov.add_input(&format!("{role}:{}", path.display()), &bytes);
        Ok(bytes)
    }

    pub fn output(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), bytes.into()));
    }

    /// Writes the outputs, `provenance.json` and `summary.json`.
    pub fn finish(self, summary: Value) -> CliResult<()> {
        let dir = &self.out_dir;
        at(dir, fs::create_dir_all(dir).map_err(Error::from))?;
        let mut hashes = serde_json::Map::new();
        for (name, bytes) in &self.files {
            write(&dir.join(name), bytes)?;
            hashes.insert(name.clone(), Value::String(content_hash(bytes)));
        }
        let prov = serde_json::to_string_pretty(&self.prov).expect("provenance serializes");
        write(&dir.join("provenance.json"), format!("{prov}\n").as_bytes())?;
        let summary = json!({ "command": self.prov.command, "seed": self.seed, "outputs": hashes, "result": summary });
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write(&dir.join("summary.json"), format!("{text}\n").as_bytes())?;
        Ok(())
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    at(path, fs::read(path).map_err(Error::from))
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    at(path, fs::write(path, bytes).map_err(Error::from))
}

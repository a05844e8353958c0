//! Content hashing and provenance records attached to every run output.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Git-style content hash: SHA-256 over `"blob <len>\0" ++ bytes`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Resolved configuration, seeds and input hashes of one command run.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config: BTreeMap<String, String>,
    pub seeds: Vec<u64>,
    /// Input file name (or logical input id) to content hash.
    pub inputs: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(command: &str, config: BTreeMap<String, String>, seeds: Vec<u64>) -> Self {
        Self { command: command.to_string(), config, seeds, inputs: BTreeMap::new() }
    }

    pub fn add_input(&mut self, name: &str, bytes: &[u8]) {
        self.inputs.insert(name.to_string(), content_hash(bytes));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_git_style_sha256() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(
            content_hash(b"hello\n"),
            "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4"
        );
    }
}

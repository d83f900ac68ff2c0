//! `run_manifest.json`: what ran, on which inputs, with which settings.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: u64,
    /// SHA-256 of every consumed file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub tool_version: String,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Files a run writes beside its payload; they are never read back as inputs.
pub const RUN_RECORDS: [&str; 3] = [MANIFEST_FILE, "metrics.jsonl", "eval_report.json"];

/// Hashes of the payload files directly inside `dir` (everything except run
/// records), sorted by name.
pub fn hash_dir(dir: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .filter(|p| !p.file_name().is_some_and(|n| RUN_RECORDS.iter().any(|r| n == *r)))
        .collect();
    paths.sort();
    for p in paths {
        let bytes = fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        out.insert(p.display().to_string(), sha256_hex(&bytes));
    }
    Ok(out)
}

impl RunManifest {
    pub fn start(command: &str, config: Value, seed: u64, inputs: BTreeMap<String, String>, threads: usize) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seed,
            inputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            threads,
            started_at: now(),
            finished_at: None,
            status: "running".to_string(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        fs::write(&path, json).map_err(|e| CliError::io(&path, e))
    }

    pub fn finish(&mut self, dir: &Path, status: &str) -> Result<(), CliError> {
        self.finished_at = Some(now());
        self.status = status.to_string();
        self.write(dir)
    }
}

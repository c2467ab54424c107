use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

/// Run record written last as `manifest.json`. Timestamps live only here.
#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config_hash: String,
    seed: Option<u64>,
    outputs: Vec<OutputEntry>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects output files for one command invocation.
pub struct OutputSet {
    command: &'static str,
    config_hash: String,
    seed: Option<u64>,
    started: u128,
    files: Vec<(String, Vec<u8>)>,
}

impl OutputSet {
    /// `config` is hashed from its canonical JSON, so equal configs hash
    /// equally regardless of the input file's formatting.
    pub fn new(command: &'static str, config: &impl Serialize, seed: Option<u64>) -> Self {
        let canonical = serde_json::to_vec(config).expect("config serializes");
        let mut bytes = command.as_bytes().to_vec();
        bytes.push(b'\n');
        bytes.extend(canonical);
        Self {
            command,
            config_hash: sha256_hex(&bytes),
            seed,
            started: now_ms(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, contents: impl Into<Vec<u8>>) {
        self.files.push((name.to_string(), contents.into()));
    }

    pub fn add_json(&mut self, name: &str, value: &impl Serialize) {
        let mut s = serde_json::to_string_pretty(value).expect("value serializes");
        s.push('\n');
        self.add(name, s);
    }

    pub fn write(self, dir: &Path) -> Result<(), CliError> {
        let io = |e: std::io::Error, p: &Path| CliError::Input(format!("{}: {e}", p.display()));
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        let mut outputs = Vec::new();
        for (name, contents) in &self.files {
            let path = dir.join(name);
            fs::write(&path, contents).map_err(|e| io(e, &path))?;
            outputs.push(OutputEntry {
                path: name.clone(),
                sha256: sha256_hex(contents),
            });
        }
        let manifest = RunManifest {
            tool: "loratune",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            config_hash: self.config_hash,
            seed: self.seed,
            outputs,
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
        };
        let path = dir.join("manifest.json");
        let mut s = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        s.push('\n');
        fs::write(&path, s).map_err(|e| io(e, &path))
    }
}

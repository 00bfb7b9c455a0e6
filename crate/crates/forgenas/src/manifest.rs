//! Append-only run records, one JSON line per command in `<out>/manifests.jsonl`.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::formats::canonical_json;

pub const MANIFEST_FILE: &str = "manifests.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub name: String,
    pub fingerprint: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Config,
    pub config_fingerprint: u64,
    pub seeds: Vec<(String, u64)>,
    pub inputs: Vec<InputRecord>,
    pub artifacts: Vec<PathBuf>,
    pub started_unix_secs: u64,
    pub wall_clock_secs: f64,
    pub threads: usize,
}

impl RunManifest {
    pub fn new(command: &str, config: &Config, threads: usize) -> Self {
        RunManifest {
            command: command.to_string(),
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
            seeds: vec![
                ("search".into(), config.search.seed),
                ("train".into(), config.train.seed),
                ("data".into(), config.data.seed),
            ],
            inputs: Vec::new(),
            artifacts: Vec::new(),
            started_unix_secs: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or(Duration::ZERO).as_secs(),
            wall_clock_secs: 0.0,
            threads,
        }
    }

    pub fn input(&mut self, name: impl Into<String>, fingerprint: u64) {
        self.inputs.push(InputRecord { name: name.into(), fingerprint });
    }

    pub fn artifact(&mut self, path: &Path) {
        self.artifacts.push(path.to_path_buf());
    }

    /// Append this record to `<out>/manifests.jsonl`.
    pub fn append(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
        let mut file = OpenOptions::new().create(true).append(true).open(&path).with_context(|| format!("cannot open {}", path.display()))?;
        writeln!(file, "{}", canonical_json(self)?).with_context(|| format!("cannot append to {}", path.display()))?;
        Ok(())
    }
}

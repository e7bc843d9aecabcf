//! `manifest.json`: what produced a run directory and what it contains.
//! Timestamps and wall-clock timings live only here, never in the metrics.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::to_toml_string;
use crate::error::Result;
use crate::trainer::TrainConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub code_version: String,
    pub command: String,
    /// Full configuration as TOML; loading it reproduces the run.
    pub config: String,
    pub seed: u64,
    pub dataset_seed: u64,
    pub deterministic: bool,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub status: String,
    pub step_wall_time_ms: Vec<u64>,
    /// File names relative to the run directory.
    pub artifacts: Vec<String>,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}

impl RunManifest {
    pub fn new(config: &TrainConfig, command: &str) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: to_toml_string(config),
            seed: config.seed,
            dataset_seed: config.dataset_seed,
            deterministic: config.deterministic,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: "running".into(),
            step_wall_time_ms: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn finish(&mut self) {
        self.finished_unix_ms = Some(now_ms());
    }

    pub fn add_artifact(&mut self, name: impl Into<String>) {
        let name = name.into();
        if !self.artifacts.contains(&name) {
            self.artifacts.push(name);
        }
    }

    /// Writes atomically via a temporary file.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(&tmp, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

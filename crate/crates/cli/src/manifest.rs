//! One `manifest.json` per run: what ran, with which settings, on what.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::{Cli, Outcome};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    /// Effective settings of the command after defaults and overrides.
    pub config: serde_json::Value,
    pub endpoint: Option<String>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub finished_at: String,
    pub exit_code: i32,
    pub error: Option<String>,
    pub versions: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(
        cli: &Cli,
        argv: &[OsString],
        outcome: &Outcome,
        exit_code: i32,
        error: Option<String>,
        started: DateTime<Utc>,
        finished: DateTime<Utc>,
    ) -> Self {
        let versions = BTreeMap::from([
            ("forkscope".to_string(), env!("CARGO_PKG_VERSION").to_string()),
            ("forkscope-core".to_string(), forkscope_core::VERSION.to_string()),
        ]);
        Self {
            command: cli.command.name().to_string(),
            argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            seed: cli.global.seed,
            config: outcome.config.clone(),
            endpoint: outcome.endpoint.clone(),
            inputs: outcome.inputs.clone(),
            outputs: outcome.outputs.clone(),
            started_at: started.to_rfc3339(),
            finished_at: finished.to_rfc3339(),
            exit_code,
            error,
            versions,
        }
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        crate::jsonl::write_json(&dir.join(MANIFEST_FILE), self)
    }

    pub fn read(dir: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fresh per-run directory, so concurrent invocations never share files.
pub fn default_run_dir(command: &str, started: DateTime<Utc>) -> PathBuf {
    PathBuf::from("forkscope-runs").join(format!(
        "{command}-{}-{}",
        started.format("%Y%m%dT%H%M%S%3f"),
        std::process::id()
    ))
}

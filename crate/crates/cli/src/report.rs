//! Machine-readable command reports, one JSON object per line.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

/// Wire and report format version.
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub v: u32,
    pub command: String,
    pub config: RunConfig,
    /// Content hash of every checkpoint involved, by stage tag.
    pub checkpoints: BTreeMap<String, String>,
    pub results: serde_json::Value,
}

impl Report {
    pub fn new(command: &str, config: &RunConfig, checkpoints: BTreeMap<String, String>, results: serde_json::Value) -> Self {
        Self {
            v: VERSION,
            command: command.to_string(),
            config: config.clone(),
            checkpoints,
            results,
        }
    }

    /// Appends the report as one line to `path` and returns that line.
    pub fn append(&self, path: &Path) -> anyhow::Result<String> {
        let line = serde_json::to_string(self)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        writeln!(f, "{line}")?;
        Ok(line)
    }
}

//! JSON run manifest written alongside command outputs.

use anyhow::{Context, Result};
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_clock_ms: u128,
    pub pass: bool,
    pub summary: String,
    /// Where this manifest goes unless `--manifest` overrides it; commands
    /// without file outputs leave it unset and only write on request.
    #[serde(skip)]
    pub default_path: Option<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, args: Vec<String>, seed: Option<u64>) -> Self {
        RunManifest {
            command: command.to_string(),
            args,
            seed,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_ms: 0,
            pass: true,
            summary: String::new(),
            default_path: None,
        }
    }

    pub fn write(&self, explicit: Option<&Path>) -> Result<()> {
        let target = explicit.or(self.default_path.as_deref());
        let Some(path) = target else {
            return Ok(());
        };
        let json = serde_json::to_string_pretty(self).context("serializing manifest")?;
        std::fs::write(path, json)
            .with_context(|| format!("writing manifest {}", path.display()))
    }
}

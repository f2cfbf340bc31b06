use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::CliError;

pub const FILE: &str = "manifest.json";

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Run provenance, written before the work starts and again when it ends.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Vec<String>,
    pub config: Option<String>,
    pub seeds: Vec<u64>,
    pub outputs: Vec<String>,
    pub started_at: u64,
    pub finished_at: Option<u64>,
    pub status: String,
    #[serde(skip)]
    dir: PathBuf,
}

impl RunManifest {
    pub fn begin(dir: &Path, config: Option<String>, seeds: Vec<u64>) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
        let m = Self {
            tool: "bf-lab",
            version: env!("CARGO_PKG_VERSION"),
            command: std::env::args().collect(),
            config,
            seeds,
            outputs: Vec::new(),
            started_at: now(),
            finished_at: None,
            status: "running".into(),
            dir: dir.to_path_buf(),
        };
        m.write()?;
        Ok(m)
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self) -> Result<(), CliError> {
        let json =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Failure(e.to_string()))?;
        std::fs::write(self.dir.join(FILE), json + "\n")
            .map_err(|e| CliError::Failure(format!("writing manifest: {e}")))
    }

    /// Records the outcome and passes it through.
    pub fn finish<T>(mut self, result: Result<T, CliError>) -> Result<T, CliError> {
        self.finished_at = Some(now());
        self.status = match &result {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write()?;
        result
    }
}

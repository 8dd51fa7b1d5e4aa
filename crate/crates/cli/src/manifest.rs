use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use attcap::Result;
use serde::Serialize;
use serde_json::Value;

/// Record of one command run and everything it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// Fully resolved configuration, defaults included.
    pub config: Value,
    pub seed: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub artifacts: Vec<PathBuf>,
    pub metrics: Option<Value>,
    pub started_unix: f64,
    pub finished_unix: f64,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

impl RunManifest {
    pub fn new(command: &str, config: Value, seed: Option<u64>, started_unix: f64) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            checkpoint: None,
            artifacts: Vec::new(),
            metrics: None,
            started_unix,
            finished_unix: started_unix,
        }
    }

    /// Stamps the finish time and writes pretty JSON to `path`.
    pub fn write(mut self, path: &Path) -> Result<()> {
        self.finished_unix = now_unix();
        fs::write(path, serde_json::to_string_pretty(&self)? + "\n")?;
        Ok(())
    }
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

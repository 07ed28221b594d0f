//! Run manifest: everything needed to identify and audit a run. Only the
//! `wall_seconds` entries vary between otherwise identical runs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub library_version: String,
    pub seed: u64,
    pub stages: Vec<Stage>,
    /// Quadrature error proxies and grid bookkeeping.
    pub quadrature: serde_json::Value,
    pub verdicts: serde_json::Value,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(command: &str, config_digest: String, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_digest,
            library_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            stages: Vec::new(),
            quadrature: serde_json::Value::Null,
            verdicts: serde_json::Value::Null,
            files: Vec::new(),
        }
    }

    /// Runs `f` and records its wall time.
    pub fn stage<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let t = std::time::Instant::now();
        let out = f();
        self.stages.push(Stage {
            name: name.into(),
            wall_seconds: t.elapsed().as_secs_f64(),
        });
        out
    }
}

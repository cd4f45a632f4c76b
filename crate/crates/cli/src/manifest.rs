use serde::Serialize;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "run_manifest.json";

pub const VERSION: &str = concat!("rsvio ", env!("CARGO_PKG_VERSION"));

/// Record of one command invocation, written next to its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// Full configuration in effect (file values with flags applied).
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub workers: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_seconds: f64,
    pub exit_status: i32,
    /// Free-form results such as keyframe counts or the error message.
    pub summary: serde_json::Value,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            version: VERSION.to_string(),
            config: serde_json::Value::Null,
            seed: None,
            workers: 1,
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_clock_seconds: 0.0,
            exit_status: 0,
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(std::io::Error::other)?;
        std::fs::write(&path, text + "\n")?;
        Ok(path)
    }
}

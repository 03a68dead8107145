use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{Map, Value};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Run record written next to a command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub artifact_version: String,
    pub args: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_config: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub threads: usize,
    pub inputs: Map<String, Value>,
    pub outputs: Map<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    pub exit_code: i32,
    pub started_unix_seconds: f64,
    pub wall_time_seconds: f64,
    #[serde(skip)]
    clock: Option<Instant>,
}

impl RunManifest {
    pub fn start(command: &str, args: &impl Serialize, threads: usize) -> Self {
        let started = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64());
        Self {
            command: command.to_string(),
            artifact_version: format!("mctm {}", env!("CARGO_PKG_VERSION")),
            args: serde_json::to_value(args).unwrap_or(Value::Null),
            train_config: None,
            seed: None,
            threads,
            inputs: Map::new(),
            outputs: Map::new(),
            converged: None,
            exit_code: 0,
            started_unix_seconds: started,
            wall_time_seconds: 0.0,
            clock: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) {
        self.inputs
            .insert(name.into(), Value::String(path.display().to_string()));
    }

    pub fn output(&mut self, name: &str, path: &Path) {
        self.outputs
            .insert(name.into(), Value::String(path.display().to_string()));
    }

    /// Writes `manifest.json` into `dir` and returns its path.
    pub fn finish(mut self, dir: &Path, exit_code: i32) -> mctm::Result<PathBuf> {
        self.exit_code = exit_code;
        self.wall_time_seconds = self.clock.map_or(0.0, |c| c.elapsed().as_secs_f64());
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| mctm::Error::io(&path, e))?;
        Ok(path)
    }
}

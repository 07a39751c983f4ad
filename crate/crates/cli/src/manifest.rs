use std::path::{Path, PathBuf};
use std::time::SystemTime;

use nulog_core::ingest::DatasetConfig;
use nulog_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Architecture recorded next to a trained model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelSummary {
    pub d: usize,
    pub heads: usize,
    pub blocks: usize,
    pub frame_length: usize,
    pub vocab_size: usize,
    pub batch_size: usize,
}

/// Everything needed to repeat a run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub dataset: String,
    pub config: DatasetConfig,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSummary>,
    #[serde(default)]
    pub parameters: serde_json::Map<String, serde_json::Value>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub started_unix: u64,
    pub elapsed_seconds: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: &DatasetConfig, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            dataset: config.name.clone(),
            config: config.clone(),
            seed,
            model: None,
            parameters: Default::default(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started_unix: SystemTime::now()
                .duration_since(SystemTime::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            elapsed_seconds: 0.0,
        }
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let value = serde_json::to_value(value).expect("manifest values serialize");
        self.parameters.insert(key.to_string(), value);
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: malformed manifest: {e}", path.display())))
    }
}

/// `dir/name.ext` becomes `dir/name.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

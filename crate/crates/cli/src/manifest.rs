use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use holopose::synth::atomic_write;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Record of one command run, written next to its primary output. Every field
/// except `duration_s` is a function of the inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub config: serde_json::Value,
    pub duration_s: f64,
}

impl RunManifest {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            config: serde_json::to_value(config).expect("configs serialize"),
            duration_s: 0.0,
        }
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.to_string(), path.display().to_string());
        self
    }

    pub fn output(mut self, path: &Path) -> Self {
        self.outputs.push(path.display().to_string());
        self
    }

    pub fn path_for(output: &Path) -> PathBuf {
        let mut name = output.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    /// Stamps the elapsed time and writes `<primary output>.manifest.json`.
    pub fn finish(mut self, started: Instant, primary: &Path) -> Result<(), CliError> {
        self.duration_s = started.elapsed().as_secs_f64();
        let mut text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        text.push('\n');
        atomic_write(&Self::path_for(primary), text.as_bytes()).map_err(CliError::runtime)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_sits_next_to_output() {
        assert_eq!(
            RunManifest::path_for(Path::new("out/data.ndl")),
            PathBuf::from("out/data.ndl.manifest.json")
        );
    }
}

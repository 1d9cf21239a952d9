//! Command configs: defaults, then an optional file, then flags.

use std::fs;
use std::path::Path;

use holopose::estimator::{FitConfig, ResidualWeights};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// Also fit the root-relative 3D observations.
    pub use_3d: bool,
    /// Hold the joint state at the ground truth and solve for the pose only.
    pub known_joints: bool,
    pub solver: FitConfig,
    pub weights: ResidualWeights,
}

impl Default for FitSettings {
    fn default() -> Self {
        Self {
            use_3d: true,
            known_joints: false,
            solver: FitConfig::default(),
            weights: ResidualWeights::default(),
        }
    }
}

#[derive(Deserialize)]
struct ManifestConfig<T> {
    config: T,
}

/// Reads a TOML config, or the config snapshot of a `.json` run manifest.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let bad = |e: &dyn std::fmt::Display| CliError::Usage(format!("invalid config {}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str::<ManifestConfig<T>>(&text)
            .map(|m| m.config)
            .map_err(|e| bad(&e))
    } else {
        toml::from_str(&text).map_err(|e| bad(&e))
    }
}

pub fn load_or_default<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    path.map_or_else(|| Ok(T::default()), load)
}

use std::fs;
use std::path::{Path, PathBuf};

use ballsim::GenerateConfig;
use rsqair::eval::EvalConfig;
use rsqair::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::CliError;

/// Everything a command needs. Layered as defaults, then the JSON config
/// file, then command-line flags; the merged result is stored next to every
/// artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Dataset directory holding `<split>.rsqb` files and `manifest.json`.
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub generate: GenerateConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const DATA_DIR_ENV: &str = "RSQAIR_DATA_DIR";

/// Recursively overlays `patch` onto `base`; objects merge key by key,
/// anything else replaces.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Defaults overlaid with the file at `path`, if any. Unknown keys anywhere
    /// in the file are rejected.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let mut merged = serde_json::to_value(Self::default()).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, patch);
        serde_json::from_value(merged).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets the master seed of every component.
    pub fn set_seed(&mut self, seed: u64) {
        self.generate.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    /// Flag, then config file, then `RSQAIR_DATA_DIR`, then `./data`.
    pub fn resolve_data_dir(&mut self, flag: Option<PathBuf>) -> PathBuf {
        let dir = flag
            .or_else(|| self.data_dir.clone())
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("data"));
        self.data_dir = Some(dir.clone());
        dir
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir)?;
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Config(e.to_string()))?;
        fs::write(dir.join(RUN_CONFIG_FILE), text)?;
        Ok(())
    }
}

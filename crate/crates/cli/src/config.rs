//! Run configuration: a JSON file whose values are overridden by flags.

use std::path::{Path, PathBuf};

use bvqa_core::{PretrainConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Environment variable naming the config file used when `--config` is absent.
pub const CONFIG_ENV: &str = "BVQA_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub threads: usize,
    /// Independent training runs with seeds `seed, seed + 1, …`.
    pub repetitions: usize,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    /// Seeds run by `gradcheck`, starting from its `--seed`.
    pub gradcheck_cases: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            threads: 1,
            repetitions: 1,
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            gradcheck_cases: 10,
        }
    }
}

impl RunConfig {
    /// Reads `explicit`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn load(explicit: Option<&Path>) -> CliResult<(Self, Option<PathBuf>)> {
        let path = explicit
            .map(Path::to_path_buf)
            .or_else(|| std::env::var_os(CONFIG_ENV).filter(|v| !v.is_empty()).map(PathBuf::from));
        let Some(path) = path else {
            return Ok((Self::default(), None));
        };
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        Ok((cfg, Some(path)))
    }
}

/// What a command actually ran with, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct Effective<'a, S: Serialize> {
    pub command: &'a str,
    pub config_file: Option<&'a Path>,
    pub seed: u64,
    pub threads: usize,
    pub out: &'a Path,
    pub settings: S,
}

impl<S: Serialize> Effective<'_, S> {
    pub fn write(&self, path: &Path) -> CliResult<()> {
        crate::output::write_json(path, self)
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use egospk::backbone::{BackboneConfig, PretrainConfig};
use egospk::eval::{HarnessConfig, ReproduceConfig};
use egospk::synth::{PretrainCorpusConfig, SynthConfig};
use egospk::vad::VadParams;
use serde::{Deserialize, Serialize};

use crate::failure::ConfigError;

/// Name of the resolved configuration written into every output directory.
pub const RESOLVED: &str = "resolved_config.toml";

/// Environment variable that roots relative `--out` paths.
pub const OUT_ROOT_ENV: &str = "EGOSPK_OUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Master seed of backbone initialisation, pre-training and the
    /// generated pre-training corpus.
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    pub sessions: usize,
    pub seed: u64,
    /// Utterances of the unlabeled pre-training corpus.
    pub pretrain_utterances: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { sessions: 10, seed: 7, pretrain_utterances: 500 }
    }
}

/// Every tunable of the pipeline. Unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub synth: SynthConfig,
    pub pretrain_corpus: PretrainCorpusConfig,
    pub vad: VadParams,
    pub backbone: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub harness: HarnessConfig,
    pub reproduce: ReproduceConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path).map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| ConfigError(format!("config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serialising the resolved config")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let p = dir.join(RESOLVED);
        fs::write(&p, self.to_toml()?).with_context(|| format!("writing {}", p.display()))
    }
}

/// Output directory for `out`, rooted at `$EGOSPK_OUT_ROOT` when relative.
pub fn out_dir(out: &Path) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if out.is_relative() => PathBuf::from(root).join(out),
        _ => out.to_path_buf(),
    }
}

pub fn create_out(out: &Path) -> Result<PathBuf> {
    let dir = out_dir(out);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

pub fn require_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(ConfigError(format!("{what} {} does not exist", path.display())).into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[pretrain]\nepochs = 3\n").is_ok());
        assert!(toml::from_str::<RunConfig>("[pretrain]\nepoch = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("bogus = 1\n").is_err());
    }
}

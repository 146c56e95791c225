//! `--config` files: a flat TOML table of training keys.
//!
//! ```toml
//! objective = "dpo"
//! beta = 0.01
//! top_k_percent = 40
//! optimizer = "adam"
//! lr = 0.001
//! epochs = 2
//! batch_size = 64
//! seed = 1
//! reference.kind = "oracle"
//! reference.path = "oracle.json"
//! data = "data.jsonl"
//! ```

use std::path::{Path, PathBuf};

use sdpo_core::{fsio, Error, InitSpec, Objective, ReferenceSpec, Result};
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub objective: Option<Objective>,
    pub beta: Option<f64>,
    pub top_k_percent: Option<f64>,
    pub optimizer: Option<String>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub reference: Option<FileReference>,
    pub init: Option<InitSpec>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileReference {
    pub kind: String,
    pub path: Option<PathBuf>,
}

impl FileReference {
    pub fn to_spec(&self) -> Result<ReferenceSpec> {
        match (self.kind.as_str(), &self.path) {
            ("init", None) => Ok(ReferenceSpec::InitialSnapshot),
            ("oracle", Some(p)) => Ok(ReferenceSpec::Oracle(p.clone())),
            ("checkpoint", Some(p)) => Ok(ReferenceSpec::Checkpoint(p.clone())),
            (kind, path) => Err(Error::Config(format!(
                "reference.kind = {kind:?} with path {path:?}: expected init (no path), oracle or checkpoint (with path)"
            ))),
        }
    }
}

impl FileConfig {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let cfg: FileConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        if cfg.epochs.is_some() && cfg.steps.is_some() {
            return Err(Error::Config(format!(
                "{}: give epochs or steps, not both",
                path.display()
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fsio::read_to_string(path)?, path)
    }
}

//! The run configuration file: every section optional, every key checked.

use std::path::{Path, PathBuf};

use nmir_core::env::EnvSpec;
use nmir_core::generator::GeneratorHyper;
use nmir_core::irl::IrlHyper;
use nmir_core::policy::PolicyHyper;
use nmir_core::runtime::EvalConfig;
use nmir_core::scan::ScanConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CollectSection {
    pub episodes: usize,
}

impl Default for CollectSection {
    fn default() -> Self {
        CollectSection { episodes: 400 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for data collection; the training sections carry their own.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvSpec,
    pub scan: ScanConfig,
    pub collect: CollectSection,
    pub generator: GeneratorHyper,
    pub policy: PolicyHyper,
    pub irl: IrlHyper,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("."),
            env: EnvSpec::t_maze(5),
            scan: ScanConfig::default(),
            collect: CollectSection::default(),
            generator: GeneratorHyper::default(),
            policy: PolicyHyper::default(),
            irl: IrlHyper::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.env
            .validate()
            .and_then(|_| cfg.scan.validate())
            .map_err(|e| UsageError(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
                Self::parse(&text)
            }
        }
    }
}

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use sdgzsl::data::SyntheticSpec;
use sdgzsl::evaluation::EvalConfig;
use sdgzsl::tc_bench::TcBenchConfig;
use sdgzsl::trainer::{GradSuiteConfig, TrainConfig};

/// Everything a command may read. Missing sections take their defaults and
/// the resolved document is written next to every command's output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synthetic: SyntheticSpec,
    pub eval: EvalConfig,
    pub gradcheck: GradSuiteConfig,
    pub tc_bench: TcBenchConfig,
    pub out_dir: Option<PathBuf>,
}

pub const RESOLVED_FILE: &str = "resolved_config.json";

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies `key.path=value` overrides. Values are read as JSON when they
    /// parse, otherwise as strings; every path must already exist.
    pub fn with_overrides(self, sets: &[String]) -> Result<RunConfig> {
        if sets.is_empty() {
            return Ok(self);
        }
        let mut doc = serde_json::to_value(&self)?;
        for set in sets {
            let (key, raw) = set
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects key=value, got {set:?}"))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = match slot {
                    Value::Object(map) => map
                        .get_mut(part)
                        .ok_or_else(|| anyhow!("unknown config key {key:?}"))?,
                    _ => bail!("config key {key:?} descends into a non-object"),
                };
            }
            *slot = value;
        }
        serde_json::from_value(doc).context("applying --set overrides")
    }

    /// One seed for every randomized section.
    pub fn with_seed(mut self, seed: Option<u64>) -> RunConfig {
        if let Some(s) = seed {
            self.train.seed = s;
            self.synthetic.seed = s;
            self.eval.seed = s;
            self.tc_bench.seed = s;
        }
        self
    }

    pub fn dump(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

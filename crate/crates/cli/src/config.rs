use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sar_core::corpus::SplitName;
use sar_core::distill::Stage2Config;
use sar_core::encoder::{EncoderConfig, Stage1Config};
use sar_core::sparse::Bm25Params;
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub split: SplitName,
    pub ks: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: SplitName::Test,
            ks: vec![5, 10, 20],
        }
    }
}

/// Everything a run depends on. Written verbatim into each run directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Dataset directory holding articles, queries and split files.
    pub data: PathBuf,
    pub bm25: Bm25Params,
    pub encoder: EncoderConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Reads a TOML file (or the defaults) and applies `key.path=value`
    /// overrides, each value parsed as TOML and falling back to a string.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Usage(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::try_from(ExperimentConfig::default())?,
        };
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Usage(format!("override `{item}` is not key=value")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_path(&mut table, key, value)?;
        }
        let config: ExperimentConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Usage(format!("configuration: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.bm25.validate()?;
        self.encoder.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Usage("eval.ks must be a non-empty list of positive cutoffs".into()).into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Usage(format!("empty key in `{key}`")))?;
    let mut node = table;
    for p in parts {
        node = node
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Usage(format!("`{p}` in `{key}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(c, back);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = ExperimentConfig::load(
            None,
            &["stage2.kd_mode=feature".into(), "stage1.epochs=3".into(), "eval.ks=[1, 2]".into()],
        )
        .unwrap();
        assert_eq!(c.stage2.kd_mode, sar_core::distill::KdMode::Feature);
        assert_eq!(c.stage1.epochs, 3);
        assert_eq!(c.eval.ks, vec![1, 2]);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for o in ["stage1.epochs=many", "eval.ks=[]", "nokey"] {
            let e = ExperimentConfig::load(None, &[o.to_string()]).unwrap_err();
            assert_eq!(crate::exit_code(&e), 1, "{o}: {e}");
        }
    }
}

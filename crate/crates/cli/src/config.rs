//! Experiment config from an optional JSON file plus command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use ppgnas::pipeline::ExperimentConfig;
use serde_json::Value;

#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON experiment config; missing fields take their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output root for stage artifacts.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Window file written by `preprocess`.
    #[arg(long)]
    pub windows: Option<PathBuf>,
    /// Fold manifest written by `preprocess`.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long)]
    pub fold: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Any config field as `key=value`; the value is parsed as JSON and
    /// falls back to a plain string (`--set channels=[8,16]`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let mut v = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => serde_json::to_value(ExperimentConfig::default())?,
        };
        let Value::Object(map) = &mut v else {
            bail!("config must be a JSON object");
        };
        let known = match serde_json::to_value(ExperimentConfig::default())? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for o in &self.overrides {
            let (k, raw) = o
                .split_once('=')
                .with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            if !known.contains_key(k) {
                bail!("unknown config field `{k}`");
            }
            map.insert(k.to_string(), parse_value(raw));
        }
        let flags = [
            ("out_dir", self.out_dir.as_deref().map(path_value)),
            ("windows", self.windows.as_deref().map(path_value)),
            ("splits", self.splits.as_deref().map(path_value)),
            ("fold", self.fold.map(Value::from)),
            ("seed", self.seed.map(Value::from)),
        ];
        for (k, val) in flags {
            if let Some(val) = val {
                map.insert(k.to_string(), val);
            }
        }
        let cfg: ExperimentConfig = serde_json::from_value(v).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

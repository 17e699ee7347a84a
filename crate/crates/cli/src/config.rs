//! Run configuration: a TOML file of dotted keys, then `IFBLEND_*`
//! environment variables, then `--override key=value` flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use ifblend::data::{Layout, Split};
use ifblend::engine::{Protocol, TrainConfig};
use ifblend::losses_metrics::{LabErrorMode, LossConfig};
use ifblend::ModelConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Prefix of environment overrides; `__` separates key segments, so
/// `IFBLEND_TRAIN__LR=1e-3` sets `train.lr`.
pub const ENV_PREFIX: &str = "IFBLEND_";

/// Name of the resolved config written next to every command's outputs.
pub const RESOLVED_NAME: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; empty means none.
    pub root: String,
    pub layout: Layout,
    pub train_split: Split,
    pub val_split: Split,
    pub eval_split: Split,
    /// When positive, train on this many generated pairs instead of `root`.
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            root: String::new(),
            layout: Layout::Ambient6k,
            train_split: Split::Train,
            val_split: Split::Val,
            eval_split: Split::Test,
            synthetic_count: 0,
            synthetic_size: 64,
            synthetic_seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub protocol: Protocol,
    pub lab_mode: LabErrorMode,
    /// Tile side for tiled inference; 0 disables tiling.
    pub tile: usize,
    pub overlap: usize,
    /// External perceptual scorer command; empty disables it.
    pub perceptual_cmd: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Parent of timestamped training run directories.
    pub runs_dir: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { runs_dir: "runs".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Builds the config from an optional file plus environment and explicit
    /// overrides, in that order of precedence.
    pub fn resolve(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>().map_err(|e| anyhow!("{}: {e}", p.display()))?
            }
            None => Table::new(),
        };
        let mut env: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_ascii_lowercase().replace("__", ".");
            set_key(&mut table, &key, &v).with_context(|| format!("environment variable {k}"))?;
        }
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
            set_key(&mut table, k.trim(), v.trim()).with_context(|| format!("override `{o}`"))?;
        }
        Self::from_table(table)
    }

    pub fn from_table(table: Table) -> Result<Self> {
        let known = Value::try_from(RunConfig::default()).expect("defaults serialize");
        let mut unknown = Vec::new();
        unknown_keys(&Value::Table(table.clone()), &known, "", &mut unknown);
        if !unknown.is_empty() {
            bail!(ConfigError(format!("unknown config key(s): {}", unknown.join(", "))));
        }
        let cfg: RunConfig =
            Value::Table(table).try_into().map_err(|e| anyhow!(ConfigError(format!("invalid config: {e}"))))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: ifblend::Error| anyhow!(ConfigError(e.to_string()));
        self.model.validate().map_err(wrap)?;
        self.loss.validate().map_err(wrap)?;
        self.train.validate(&self.model).map_err(wrap)?;
        if self.data.synthetic_count > 0 && self.data.synthetic_size % self.model.size_multiple() != 0 {
            bail!(ConfigError(format!(
                "data.synthetic_size {} must be divisible by {}",
                self.data.synthetic_size,
                self.model.size_multiple()
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Writes the resolved config as `config.toml` inside `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

/// A configuration problem; maps to the validation exit code.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn unknown_keys(v: &Value, known: &Value, prefix: &str, out: &mut Vec<String>) {
    let (Value::Table(t), Value::Table(k)) = (v, known) else { return };
    for (key, val) in t {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match k.get(key) {
            Some(kv) => unknown_keys(val, kv, &path, out),
            None => out.push(path),
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn set_key(table: &mut Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!(ConfigError(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| anyhow!(ConfigError(format!("`{p}` in `{key}` is not a section"))))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

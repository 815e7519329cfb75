//! Run configuration: a TOML file with `moe`, `loss`, `train` and `data`
//! tables, dotted-key `key=value` overrides, and the JSON run manifest that
//! records the fully resolved configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::routing::MoEConfig;
use crate::synthetic::{SyntheticConfig, TrainerConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub moe: MoEConfig,
    pub loss: LossConfig,
    pub train: TrainerConfig,
    pub data: SyntheticConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.moe.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.validate(&self.moe)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let value = toml::Value::Table(table);
        serde_path_to_error::deserialize(value).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("{path}: {}", e.into_inner()))
        })
    }

    /// Resolves a configuration from an optional file (TOML, or a JSON run
    /// manifest), then `key=value` overrides, then an explicit seed.
    pub fn resolve(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        Self::resolve_with_base(None, path, overrides, seed)
    }

    /// As `resolve`, but keys the file leaves unset fall back to `base`
    /// instead of the built-in defaults.
    pub fn resolve_with_base(
        base: Option<&RunConfig>,
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
    ) -> Result<Self> {
        let file = match path {
            None => toml::Table::new(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                if p.extension().is_some_and(|e| e == "json") {
                    let m: RunManifest = serde_json::from_str(&text)
                        .map_err(|e| Error::Config(format!("{}: not a run manifest: {e}", p.display())))?;
                    toml::Table::try_from(&m.config).map_err(|e| Error::Config(e.to_string()))?
                } else {
                    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
            }
        };
        let mut table = match base {
            Some(b) => toml::Table::try_from(b).map_err(|e| Error::Config(e.to_string()))?,
            None => toml::Table::new(),
        };
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        if let Some(s) = seed {
            apply_override(&mut table, &format!("train.seed={s}"))?;
        }
        let cfg = Self::from_table(table)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Recursively overlays `top` onto `base`; tables merge, other values replace.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses the right-hand side as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c=value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub const MANIFEST_FORMAT: &str = "himoe-run/1";

/// Everything needed to rerun a command, written before any compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    /// Overrides exactly as given on the command line.
    pub overrides: Vec<String>,
    pub artifacts: BTreeMap<String, String>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub status: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, overrides: &[String]) -> Self {
        RunManifest {
            format: MANIFEST_FORMAT.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.train.seed,
            config: config.clone(),
            overrides: overrides.to_vec(),
            artifacts: BTreeMap::new(),
            timings: BTreeMap::new(),
            status: "started".into(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

//! TOML configuration files with command-line overrides.
//!
//! Overrides are `key = value` pairs whose keys mirror the file's keys
//! (dotted for nested tables, e.g. `model.channels`).

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use unisoma_core::train::TrainConfig;
use unisoma_core::worlds::{ScenarioConfig, ScenarioKind};

use crate::error::{Error, Result};

/// Settings of `generate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub samples: usize,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
    pub seed: u64,
    pub scenario: ScenarioConfig,
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.parse::<toml::Table>()
        .map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

/// Parses a command-line value as TOML, falling back to a bare string.
pub fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets dotted `key` in `table`, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::Config(format!("empty key `{key}`")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("key `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Recursively lays `top` over `base`.
pub fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn decode<T: DeserializeOwned>(table: toml::Table, what: &str) -> Result<T> {
    T::deserialize(toml::Value::Table(table)).map_err(|e| Error::Config(format!("{what}: {}", e.message())))
}

fn to_table<T: Serialize>(value: &T) -> toml::Table {
    toml::Table::try_from(value).expect("configs serialize to TOML tables")
}

/// Scenario keys laid over the defaults of the scenario's `kind`.
pub fn scenario_from_table(mut table: toml::Table) -> Result<ScenarioConfig> {
    let kind = match table.get("kind") {
        Some(v) => ScenarioKind::deserialize(v.clone()).map_err(|e| Error::Config(format!("scenario key `kind`: {}", e.message())))?,
        None => return Err(Error::Config("scenario key `kind` is required".into())),
    };
    let mut base = to_table(&ScenarioConfig::default_for(kind));
    table.remove("kind");
    merge(&mut base, table);
    let cfg: ScenarioConfig = decode(base, "scenario")?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn generate_config(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<GenerateConfig> {
    let mut table = toml::Table::new();
    table.insert("samples".into(), toml::Value::Integer(10));
    table.insert("splits".into(), toml::Value::try_from([0.8, 0.1, 0.1]).expect("array"));
    table.insert("seed".into(), toml::Value::Integer(0));
    if let Some(path) = file {
        merge(&mut table, read_table(path)?);
    }
    for (k, v) in overrides {
        set_key(&mut table, k, v.clone())?;
    }
    let scenario = match table.remove("scenario") {
        Some(toml::Value::Table(t)) => scenario_from_table(t)?,
        Some(_) => return Err(Error::Config("key `scenario` must be a table".into())),
        None => return Err(Error::Config("key `scenario.kind` is required".into())),
    };
    let mut rest = table;
    rest.insert("scenario".into(), toml::Value::Table(to_table(&scenario)));
    decode(rest, "generate config")
}

pub fn train_config(file: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<TrainConfig> {
    let mut table = match file {
        Some(path) => read_table(path)?,
        None => toml::Table::new(),
    };
    for (k, v) in overrides {
        set_key(&mut table, k, v.clone())?;
    }
    let cfg: TrainConfig = decode(table, "training config")?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenario_defaults_follow_kind() {
        let t: toml::Table = "kind = \"cavity_grip\"\nsteps = 3".parse().unwrap();
        let cfg = scenario_from_table(t).unwrap();
        assert_eq!(cfg.steps, 3);
        assert_eq!(cfg.radii, ScenarioConfig::cavity_grip().radii);
    }

    #[test]
    fn unknown_and_invalid_keys_are_named() {
        let t: toml::Table = "kind = \"cavity_grip\"\nstepz = 3".parse().unwrap();
        let e = scenario_from_table(t).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
        let t: toml::Table = "kind = \"cavity_grip\"\nspacing = -1.0".parse().unwrap();
        let e = scenario_from_table(t).unwrap_err().to_string();
        assert!(e.contains("spacing"), "{e}");
        let e = train_config(None, &[("model.chanels".into(), parse_value("4"))]).unwrap_err().to_string();
        assert!(e.contains("chanels"), "{e}");
        let e = train_config(None, &[("epochs".into(), parse_value("0"))]).unwrap_err().to_string();
        assert!(e.contains("epochs"), "{e}");
    }

    #[test]
    fn overrides_win_over_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.toml");
        fs::write(&path, "epochs = 5\nlr = 0.01\n[model]\nchannels = 16\n").unwrap();
        let cfg = train_config(Some(&path), &[("model.channels".into(), parse_value("8")), ("task".into(), parse_value("autoregressive"))]).unwrap();
        assert_eq!((cfg.epochs, cfg.lr, cfg.model.channels), (5, 0.01, 8));
        assert_eq!(cfg.task, unisoma_core::train::Task::Autoregressive);
    }

    #[test]
    fn generate_config_layers_scenario() {
        let g = generate_config(None, &[("scenario.kind".into(), parse_value("bilateral_press")), ("samples".into(), parse_value("4"))]).unwrap();
        assert_eq!(g.samples, 4);
        assert_eq!(g.scenario, ScenarioConfig::bilateral_press());
    }
}

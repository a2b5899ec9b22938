//! Config files, dotted overrides and the config hash.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use super::CliError;
use crate::detkernels::ExecutionProfile;
use crate::rlcore::LossConfig;
use crate::trainer::TrainConfig;

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Parses `key.path=value`. The value is read as a TOML value when it parses
/// as one and as a bare string otherwise.
pub fn parse_override(s: &str) -> Result<(Vec<String>, Value), CliError> {
    let (key, raw) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(|p| p.trim().to_string()).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{s}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((path, value))
}

// A preset name becomes its table when an override reaches inside it.
fn expand_preset(key: &str, name: &str) -> Option<Value> {
    match key {
        "rollout_profile" | "train_profile" => Value::try_from(ExecutionProfile::preset(name)?).ok(),
        "loss" => Value::try_from(LossConfig::named(name)?).ok(),
        _ => None,
    }
}

pub fn apply_override(table: &mut Table, path: &[String], value: Value) -> Result<(), CliError> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for (i, key) in parents.iter().enumerate() {
        let entry = cur.entry(key.clone()).or_insert_with(|| Value::Table(Table::new()));
        if let Value::String(name) = entry {
            if i == 0 {
                if let Some(expanded) = expand_preset(key, name) {
                    *entry = expanded;
                }
            }
        }
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::Config(format!("override key `{}`: `{key}` is not a table", path.join(".")))),
        };
    }
    cur.insert(last.clone(), value);
    Ok(())
}

/// Recursive merge; tables merge key by key, everything else is replaced.
pub fn merge(base: &mut Table, top: &Table) {
    for (k, v) in top {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

pub fn config_from_table(table: Table) -> Result<TrainConfig, CliError> {
    let config = TrainConfig::deserialize(Value::Table(table)).map_err(|e| CliError::Config(e.to_string()))?;
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(config)
}

/// Reads a run config and applies `key=value` overrides in order.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig, CliError> {
    let mut table = read_table(path)?;
    for o in overrides {
        let (p, v) = parse_override(o)?;
        apply_override(&mut table, &p, v)?;
    }
    config_from_table(table)
}

/// The fully resolved config as TOML; this text is what gets hashed.
pub fn resolved_toml(config: &TrainConfig) -> String {
    toml::to_string(&config.resolved()).expect("train config serializes")
}

/// SHA-256 of the resolved config text.
pub fn config_hash(config: &TrainConfig) -> String {
    hex::encode(Sha256::digest(resolved_toml(config).as_bytes()))
}

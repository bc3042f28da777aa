//! TOML configuration files and `key=value` overrides.
//!
//! Top-level keys set plain fields; the `[loss_weights]`, `[ablation]` and
//! `[augment]` tables set the nested ones. Every problem found, whether an
//! unknown key, an unparsable value or a violated constraint, is reported
//! together.

use std::path::Path;

use pccl_core::config::KEYS;
use pccl_core::TrainConfig;

use crate::error::{Error, Result};

/// Starting point before a config file and overrides are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// Published settings: 448 px, full-size models, 400 epochs.
    Paper,
    /// 64 px, reduced models, 60 epochs.
    Desk,
}

impl Preset {
    pub fn config(&self) -> TrainConfig {
        match self {
            Preset::Paper => TrainConfig::paper(),
            Preset::Desk => TrainConfig::desk(),
        }
    }
}

fn scalar(value: &toml::Value) -> Option<String> {
    match value {
        toml::Value::String(s) => Some(s.clone()),
        toml::Value::Integer(i) => Some(i.to_string()),
        toml::Value::Float(f) => Some(f.to_string()),
        toml::Value::Boolean(b) => Some(b.to_string()),
        _ => None,
    }
}

/// Applies a TOML document, appending every problem to `problems`.
pub fn apply_toml(config: &mut TrainConfig, text: &str, problems: &mut Vec<String>) {
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            problems.push(format!("not valid TOML: {e}"));
            return;
        }
    };
    let mut set = |key: String, value: &toml::Value| match scalar(value) {
        Some(v) => {
            if let Err(e) = config.set(&key, &v) {
                problems.push(e.to_string());
            }
        }
        None => problems.push(format!("{key}: expected a string, number or boolean")),
    };
    for (key, value) in &table {
        match value {
            toml::Value::Table(section) => {
                for (sub, v) in section {
                    set(format!("{key}.{sub}"), v);
                }
            }
            v => set(key.clone(), v),
        }
    }
}

/// Applies `key=value` overrides, appending every problem to `problems`.
pub fn apply_overrides(config: &mut TrainConfig, overrides: &[String], problems: &mut Vec<String>) {
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                if let Err(e) = config.set(k.trim(), v.trim()) {
                    problems.push(e.to_string());
                }
            }
            None => problems.push(format!("override {o:?} is not of the form key=value")),
        }
    }
}

/// Preset, then file, then overrides, then validation.
pub fn resolve(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut config = preset.config();
    let mut problems = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        apply_toml(&mut config, &text, &mut problems);
    }
    apply_overrides(&mut config, overrides, &mut problems);
    problems.extend(config.problems());
    if problems.is_empty() {
        Ok(config)
    } else {
        Err(Error::Config(problems.join("\n  ")))
    }
}

fn toml_value(text: &str) -> toml::Value {
    if let Ok(i) = text.parse::<i64>() {
        toml::Value::Integer(i)
    } else if let Ok(f) = text.parse::<f64>() {
        toml::Value::Float(f)
    } else if let Ok(b) = text.parse::<bool>() {
        toml::Value::Boolean(b)
    } else {
        toml::Value::String(text.to_string())
    }
}

/// The full configuration as a TOML document that [`resolve`] reads back
/// to the same value.
pub fn to_toml(config: &TrainConfig) -> String {
    let mut root = toml::Table::new();
    for info in KEYS {
        let value = toml_value(&config.get(info.key).expect("listed keys exist"));
        match info.key.split_once('.') {
            Some((section, key)) => {
                let entry = root.entry(section).or_insert_with(|| toml::Value::Table(toml::Table::new()));
                entry.as_table_mut().expect("sections are tables").insert(key.to_string(), value);
            }
            None => {
                root.insert(info.key.to_string(), value);
            }
        }
    }
    toml::to_string(&root).expect("plain table serialises")
}

/// One line per configuration key with its value under `config`.
pub fn describe_keys(config: &TrainConfig) -> String {
    let width = KEYS.iter().map(|k| k.key.len()).max().unwrap_or(0);
    KEYS.iter()
        .map(|k| format!("  {:width$}  {}  [default: {}]", k.key, k.help, config.get(k.key).expect("listed keys exist")))
        .collect::<Vec<_>>()
        .join("\n")
}

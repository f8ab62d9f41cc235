//! Sectioned TOML experiment configuration.
//!
//! ```toml
//! [env]            # EnvConfig, overlaid on the chosen task's defaults
//! horizon = 50
//! [env.physics]
//! grasp_break_force = 7.0
//! [demo]           # DemoConfig
//! [agent]          # AgentConfig, overlaid on the chosen algorithm's defaults
//! batch = 128
//! [train]          # TrainConfig
//! [eval]           # EvalConfig
//! ```
//!
//! Only keys that differ from the defaults need to be written. Unknown
//! sections or keys are rejected.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::agents::{AgentConfig, Algorithm};
use crate::demogen::DemoConfig;
use crate::env::{EnvConfig, TaskId};
use crate::error::{Error, Result};
use crate::eval::{DEFAULT_EPISODES, DEFAULT_SEEDS, DEFAULT_STRAIN_THRESHOLD};
use crate::train::TrainConfig;

const SECTIONS: [&str; 5] = ["env", "demo", "agent", "train", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seeds: Vec<u64>,
    pub strain_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: DEFAULT_EPISODES,
            seeds: DEFAULT_SEEDS.to_vec(),
            strain_threshold: DEFAULT_STRAIN_THRESHOLD,
        }
    }
}

/// Parsed config file; sections are resolved against defaults on demand.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigFile {
    table: Table,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        for key in table.keys() {
            if !SECTIONS.contains(&key.as_str()) {
                return Err(Error::Configuration(format!(
                    "unknown section `{key}` (expected one of {SECTIONS:?})"
                )));
            }
        }
        Ok(Self { table })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Configuration(m) => Error::Configuration(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: &T) -> Result<T> {
        match self.table.get(name) {
            None => overlay(base, &Table::new(), name),
            Some(Value::Table(t)) => overlay(base, t, name),
            Some(_) => Err(Error::Configuration(format!("`{name}` must be a table"))),
        }
    }

    /// Environment for `task`, with file overrides applied.
    pub fn env(&self, task: TaskId) -> Result<EnvConfig> {
        let cfg: EnvConfig = self.section("env", &EnvConfig::for_task(task))?;
        if cfg.task.task_id != task {
            return Err(Error::Configuration(format!(
                "config file sets task {} but task {task} was requested",
                cfg.task.task_id
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn demo(&self) -> Result<DemoConfig> {
        self.section("demo", &DemoConfig::default())
    }

    pub fn agent(&self, algorithm: Algorithm) -> Result<AgentConfig> {
        let cfg: AgentConfig = self.section("agent", &AgentConfig::for_algorithm(algorithm))?;
        if cfg.algorithm != algorithm {
            return Err(Error::Configuration(format!(
                "config file sets algorithm {} but {algorithm} was requested",
                cfg.algorithm
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train(&self) -> Result<TrainConfig> {
        self.section("train", &TrainConfig::default())
    }

    pub fn eval(&self) -> Result<EvalConfig> {
        self.section("eval", &EvalConfig::default())
    }
}

/// Deep-merges `overrides` into the serialized `base` and deserializes the
/// result. Keys that do not survive the round trip are unknown fields,
/// which catches typos.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, overrides: &Table, path: &str) -> Result<T> {
    let conf = |e: String| Error::Configuration(e);
    let mut merged = Value::try_from(base).map_err(|e| conf(e.to_string()))?;
    merge(&mut merged, overrides, path)?;
    let out: T = merged
        .try_into()
        .map_err(|e: toml::de::Error| conf(format!("[{path}]: {e}")))?;
    let back = Value::try_from(&out).map_err(|e| conf(e.to_string()))?;
    check_known(&back, overrides, path)?;
    Ok(out)
}

fn merge(into: &mut Value, overrides: &Table, path: &str) -> Result<()> {
    let Value::Table(target) = into else {
        return Err(Error::Configuration(format!("`{path}` is not a table")));
    };
    for (key, value) in overrides {
        match (target.get_mut(key), value) {
            (Some(existing @ Value::Table(_)), Value::Table(sub)) => merge(existing, sub, &format!("{path}.{key}"))?,
            (Some(existing), v) => *existing = v.clone(),
            (None, v) => {
                target.insert(key.clone(), v.clone());
            }
        }
    }
    Ok(())
}

fn check_known(resolved: &Value, overrides: &Table, path: &str) -> Result<()> {
    for (key, value) in overrides {
        let here = format!("{path}.{key}");
        match (resolved.get(key), value) {
            (None, _) => return Err(Error::Configuration(format!("unknown key `{here}`"))),
            (Some(r), Value::Table(sub)) if r.is_table() => check_known(r, sub, &here)?,
            _ => {}
        }
    }
    Ok(())
}

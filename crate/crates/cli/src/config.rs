//! Flat `key = value` run configuration.
//!
//! Keys carry a section prefix (`env.`, `net.`, `train.`, `paths.`) except
//! the run seed, which is the bare key `seed`. Lines starting with `#` and
//! blank lines are ignored. Optional values are written as `none`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fenet::envs::EnvSpec;
use fenet::nets::NetConfig;
use fenet::trainer::TrainConfig;
use fenet::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Name of the resolved config written into every run directory.
pub const RESOLVED_CONFIG: &str = "config.txt";
/// Name of the file holding the run seed.
pub const SEED_FILE: &str = "seed.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvSpec,
    /// `obs_dim` and `action_dim` always follow `env`.
    pub net: NetConfig,
    /// `seed` always equals [`RunConfig::seed`].
    pub train: TrainConfig,
    pub expert_file: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            env: EnvSpec::point_mass(),
            net: NetConfig::default(),
            train: TrainConfig::default(),
            expert_file: PathBuf::from("expert.eps"),
            output_dir: PathBuf::from("run"),
            seed: 0,
        };
        c.sync();
        c
    }
}

/// Keys that are set elsewhere and refused in files.
const DERIVED: [(&str, &str); 3] = [
    ("net.obs_dim", "follows env.name"),
    ("net.action_dim", "follows env.name"),
    ("train.seed", "use the top-level key seed"),
];

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("config line {line}: {msg}"))
}

fn to_map<T: Serialize>(v: &T) -> Map<String, Value> {
    match serde_json::to_value(v).expect("config structs serialize") {
        Value::Object(m) => m,
        _ => unreachable!("config structs serialize to objects"),
    }
}

fn from_map<T: DeserializeOwned>(section: &str, m: Map<String, Value>) -> Result<T> {
    serde_json::from_value(Value::Object(m)).map_err(|e| Error::Config(format!("{section}: {e}")))
}

/// Parses `text` into the JSON type of `like`.
fn parse_value(text: &str, like: &Value) -> std::result::Result<Value, String> {
    let bad = || format!("cannot parse {text:?} as {like}");
    match like {
        Value::Bool(_) => text.parse::<bool>().map(Value::Bool).map_err(|_| bad()),
        Value::Number(n) if n.is_f64() => text
            .parse::<f64>()
            .ok()
            .and_then(|f| serde_json::Number::from_f64(f).map(Value::Number))
            .ok_or_else(bad),
        Value::Number(n) if n.is_i64() && !n.is_u64() => text
            .parse::<i64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| bad()),
        Value::Number(_) => text
            .parse::<u64>()
            .map(|v| Value::Number(v.into()))
            .map_err(|_| bad()),
        Value::String(_) => Ok(Value::String(text.to_string())),
        Value::Null => {
            if text == "none" {
                Ok(Value::Null)
            } else if let Ok(v) = text.parse::<u64>() {
                Ok(Value::Number(v.into()))
            } else if let Some(n) = text.parse::<f64>().ok().and_then(serde_json::Number::from_f64) {
                Ok(Value::Number(n))
            } else {
                Ok(Value::String(text.to_string()))
            }
        }
        _ => Err(bad()),
    }
}

/// Deserializes a section to catch bad enum names at the offending line.
fn check_section(section: &str, map: &Map<String, Value>) -> std::result::Result<(), String> {
    let v = Value::Object(map.clone());
    let r = match section {
        "env" => serde_json::from_value::<EnvSpec>(v).map(drop),
        "net" => serde_json::from_value::<NetConfig>(v).map(drop),
        _ => serde_json::from_value::<TrainConfig>(v).map(drop),
    };
    r.map_err(|e| e.to_string())
}

fn render_value(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

impl RunConfig {
    /// Makes the derived fields agree with their sources.
    fn sync(&mut self) {
        self.net.obs_dim = self.env.obs_dim;
        self.net.action_dim = self.env.action_dim;
        self.train.seed = self.seed;
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(i + 1, format!("expected key = value, got {line:?}")))?;
            pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
        }
        Self::default().with(&pairs)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Overrides from `(line, key, value)` triples.
    fn with(&self, pairs: &[(usize, String, String)]) -> Result<Self> {
        let mut env = to_map(&self.env);
        let mut net = to_map(&self.net);
        let mut train = to_map(&self.train);
        let mut out = self.clone();
        // the env name fixes the pixel count, so it is applied first
        let env_name = pairs.iter().rev().find(|(_, k, _)| k == "env.name");
        if let Some((line, _, v)) = env_name {
            let name = fenet::envs::EnvName::parse(v).map_err(|e| config_err(*line, e))?;
            env = to_map(&EnvSpec {
                name,
                ..EnvSpec::for_name(name)
            });
        }
        for (line, key, value) in pairs {
            if let Some((_, why)) = DERIVED.iter().find(|(k, _)| k == key) {
                return Err(config_err(*line, format!("{key} cannot be set: {why}")));
            }
            match key.as_str() {
                "seed" => {
                    out.seed = value
                        .parse()
                        .map_err(|_| config_err(*line, format!("seed must be an unsigned integer, got {value:?}")))?
                }
                "paths.expert_file" => out.expert_file = PathBuf::from(value),
                "paths.output_dir" => out.output_dir = PathBuf::from(value),
                _ => {
                    let (section, field) = key
                        .split_once('.')
                        .ok_or_else(|| config_err(*line, format!("unknown key {key:?}")))?;
                    let map = match section {
                        "env" => &mut env,
                        "net" => &mut net,
                        "train" => &mut train,
                        _ => return Err(config_err(*line, format!("unknown key {key:?}"))),
                    };
                    let slot = map
                        .get_mut(field)
                        .ok_or_else(|| config_err(*line, format!("unknown key {key:?}")))?;
                    *slot = parse_value(value, slot).map_err(|e| config_err(*line, format!("{key}: {e}")))?;
                    check_section(section, map).map_err(|e| config_err(*line, format!("{key}: {e}")))?;
                }
            }
        }
        out.env = from_map("env", env)?;
        out.net = from_map("net", net)?;
        out.train = from_map("train", train)?;
        out.sync();
        out.env.validate()?;
        out.net.validate()?;
        out.train.validate(out.env.episode_length)?;
        Ok(out)
    }

    /// Applies command-line style overrides, e.g. `("train.mode", "rl_only")`.
    pub fn override_with(&self, pairs: &[(&str, String)]) -> Result<Self> {
        let triples: Vec<_> = pairs.iter().map(|(k, v)| (0, k.to_string(), v.clone())).collect();
        self.with(&triples).map_err(|e| match e {
            Error::Config(m) => Error::Config(m.replace("config line 0: ", "flag: ")),
            other => other,
        })
    }

    /// Every key with its resolved value, in file order.
    pub fn entries(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for (section, map) in [
            ("env", to_map(&self.env)),
            ("net", to_map(&self.net)),
            ("train", to_map(&self.train)),
        ] {
            for (k, v) in map {
                let key = format!("{section}.{k}");
                if DERIVED.iter().any(|(d, _)| *d == key) {
                    continue;
                }
                out.insert(key, render_value(&v));
            }
        }
        out.insert("paths.expert_file".into(), self.expert_file.display().to_string());
        out.insert("paths.output_dir".into(), self.output_dir.display().to_string());
        out.insert("seed".into(), self.seed.to_string());
        out
    }

    /// The resolved config as text that [`RunConfig::parse`] reads back to
    /// an equal value.
    pub fn render(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

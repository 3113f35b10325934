//! Run configuration: defaults, JSON config files and dotted-path overrides.

use std::path::{Path, PathBuf};

use modp::blockworld::{DisturbanceSpec, TaskSpec};
use modp::trainer::{Condition, TrainConfig};
use modp::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSettings {
    pub n: usize,
    pub noise: f64,
    /// Extra attempts per demonstration before giving up.
    pub max_retries: usize,
}

impl Default for DemoSettings {
    fn default() -> Self {
        Self {
            n: 100,
            noise: 0.05,
            max_retries: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub condition: Condition,
    pub rollouts: usize,
    pub seeds: Vec<u64>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            condition: Condition::Nominal,
            rollouts: 50,
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSettings {
    pub host: String,
    pub port: u16,
    pub tick_hz: f64,
    /// Nominal rollouts used to map experts to stages; 0 skips calibration.
    pub calibration_rollouts: usize,
}

impl Default for SteerSettings {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8765,
            tick_hz: 20.0,
            calibration_rollouts: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Parent of the numbered run directories.
    pub out: PathBuf,
    pub demos: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs"),
            demos: None,
            ckpt: None,
            report: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub task: TaskSpec,
    /// Applied on every step of a steering session.
    pub disturbance: DisturbanceSpec,
    pub train: TrainConfig,
    pub demos: DemoSettings,
    pub eval: EvalSettings,
    pub steer: SteerSettings,
    pub paths: Paths,
}

impl RunConfig {
    /// Defaults, then `file` merged on top, then each override in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut doc = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.to_owned(),
                source,
            })?;
            let layer: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            if !layer.is_object() {
                return Err(Error::Config(format!(
                    "{}: expected a JSON object",
                    path.display()
                )));
            }
            merge(&mut doc, layer);
        }
        for (key, raw) in overrides {
            set_path(&mut doc, key, parse_value(raw))?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        let expected = self.task.obs_dim();
        if self.train.policy.obs_dim != expected {
            return Err(Error::Config(format!(
                "train.policy.obs_dim is {} but a {}-object task observes {expected} values",
                self.train.policy.obs_dim, self.task.num_objects
            )));
        }
        Ok(())
    }
}

/// Splits `--a.b value` and `--a.b=value` out of `args`; everything else is
/// returned untouched for the regular parser.
pub fn extract_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        if arg == "--" {
            rest.push(arg);
            rest.extend(it.by_ref());
            break;
        }
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_owned())),
            None => (flag, None),
        };
        if !name.contains('.') {
            rest.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .ok_or_else(|| Error::Config(format!("--{name} needs a value")))?,
        };
        overrides.push((name.to_owned(), value));
    }
    Ok((rest, overrides))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()))
}

fn merge(base: &mut Value, layer: Value) {
    match (base, layer) {
        (Value::Object(b), Value::Object(l)) => {
            for (k, v) in l {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Short names accepted on the command line.
fn expand(key: &str) -> Vec<String> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let prefix: &[&str] = match parts[0] {
        "moe" | "chunking" | "schedule" => &["train", "policy"],
        "policy" | "optimizer" => &["train"],
        _ => &[],
    };
    if parts.len() == 2 && parts[0] == "moe" {
        parts[1] = match parts[1] {
            "beta" => "beta_entropy",
            "lambda" => "lambda_load",
            "n" | "N" => "num_experts",
            "k" => "top_k",
            other => other,
        };
    }
    prefix
        .iter()
        .chain(parts.iter())
        .map(|s| s.to_string())
        .collect()
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let path = expand(key);
    let mut node = doc;
    for (i, part) in path.iter().enumerate() {
        let unknown = || Error::Config(format!("unknown config key {key:?}"));
        let map = node.as_object_mut().ok_or_else(unknown)?;
        let slot = map.get_mut(part).ok_or_else(unknown)?;
        if i + 1 == path.len() {
            *slot = value;
            return Ok(());
        }
        node = slot;
    }
    unreachable!("split always yields at least one part")
}

//! Run configuration: defaults, then a flat dotted-key JSON file, then flags.

use std::path::{Path, PathBuf};

use eri_core::featstore::{Split, SynthSpec};
use eri_core::objectives::LossKind;
use eri_core::encoders::FusionMode;
use eri_core::tuner::SearchSpace;
use eri_core::Hyperparams;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::Failure;

/// Values taken from the command line; `None` means "not given".
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub parallelism: Option<usize>,
    pub loss: Option<String>,
    pub fusion: Option<String>,
    pub trials: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<String>,
    pub members: Vec<PathBuf>,
    pub verbosity: u8,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub parallelism: usize,
    pub split: Option<Split>,
    pub checkpoint: Option<PathBuf>,
    pub verbosity: u8,
    pub hp: Hyperparams,
    pub space: SpaceConfig,
    pub synth: SynthSpec,
    pub ensemble: EnsembleConfig,
}

/// Search-space keys; fixed trial settings come from `hp`.
#[derive(Clone, Debug, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SpaceConfig {
    pub lr: (f64, f64),
    pub batch_size: (usize, usize),
    pub hidden_dim: (usize, usize),
    pub trials: usize,
    pub max_epochs_per_trial: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        let s = SearchSpace::default();
        SpaceConfig {
            lr: s.lr,
            batch_size: s.batch_size,
            hidden_dim: s.hidden_dim,
            trials: s.trials,
            max_epochs_per_trial: s.max_epochs_per_trial,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub members: Vec<PathBuf>,
    pub weights: Option<Vec<f64>>,
}

impl RunConfig {
    pub fn search_space(&self) -> SearchSpace {
        SearchSpace {
            lr: self.space.lr,
            batch_size: self.space.batch_size,
            hidden_dim: self.space.hidden_dim,
            trials: self.space.trials,
            max_epochs_per_trial: self.space.max_epochs_per_trial,
            base: self.hp.clone(),
        }
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::config(format!("invalid config `{field}`: {msg}"))
}

fn scalar<T: DeserializeOwned>(key: &str, v: &Value) -> Result<T, Failure> {
    serde_json::from_value(v.clone()).map_err(|e| config_err(key, e))
}

/// Applies `section.field` keys onto the default value of `T`, checking
/// each key exists and each value has the right type.
fn section<T: Serialize + DeserializeOwned + Default>(
    name: &str,
    keys: &[(String, Value)],
) -> Result<T, Failure> {
    let Value::Object(base) = serde_json::to_value(T::default()).expect("defaults serialize") else {
        unreachable!("sections are structs")
    };
    let mut merged = base.clone();
    for (k, v) in keys {
        let field = &k[name.len() + 1..];
        if !base.contains_key(field) {
            return Err(config_err(k, "unknown key"));
        }
        let mut single = base.clone();
        single.insert(field.to_string(), v.clone());
        serde_json::from_value::<T>(Value::Object(single)).map_err(|e| config_err(k, e))?;
        merged.insert(field.to_string(), v.clone());
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| config_err(name, e))
}

fn read_file(path: &Path) -> Result<Map<String, Value>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err("config", format!("cannot read {}: {e}", path.display())))?;
    match serde_json::from_str(&text) {
        Ok(Value::Object(m)) => Ok(m),
        Ok(_) => Err(config_err("config", format!("{} must hold a JSON object", path.display()))),
        Err(e) => Err(config_err("config", format!("{}: {e}", path.display()))),
    }
}

/// Best-effort output directory, used when resolution itself fails.
pub fn fallback_out(o: &Overrides) -> PathBuf {
    if let Some(out) = &o.out {
        return out.clone();
    }
    o.config
        .as_deref()
        .and_then(|p| read_file(p).ok())
        .and_then(|m| m.get("out").and_then(Value::as_str).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"))
}

pub fn resolve(o: &Overrides) -> Result<RunConfig, Failure> {
    let file = match &o.config {
        Some(p) => read_file(p)?,
        None => Map::new(),
    };
    let mut top = Map::new();
    let mut by_section: [(&str, Vec<(String, Value)>); 4] =
        [("hp", vec![]), ("space", vec![]), ("synth", vec![]), ("ensemble", vec![])];
    for (k, v) in file {
        match by_section
            .iter_mut()
            .find(|(s, _)| k.len() > s.len() + 1 && k.starts_with(s) && k.as_bytes()[s.len()] == b'.')
        {
            Some((_, keys)) => keys.push((k, v)),
            None => {
                top.insert(k, v);
            }
        }
    }
    const TOP: [&str; 7] = ["manifest", "out", "seed", "parallelism", "split", "checkpoint", "verbosity"];
    if let Some(k) = top.keys().find(|k| !TOP.contains(&k.as_str())) {
        return Err(config_err(k, "unknown key"));
    }
    let get = |k: &str| top.get(k).filter(|v| !v.is_null());

    let mut hp: Hyperparams = section("hp", &by_section[0].1)?;
    let mut space: SpaceConfig = section("space", &by_section[1].1)?;
    let synth: SynthSpec = section("synth", &by_section[2].1)?;
    let mut ensemble: EnsembleConfig = section("ensemble", &by_section[3].1)?;

    let seed = match o.seed {
        Some(s) => s,
        None => get("seed").map(|v| scalar("seed", v)).transpose()?.unwrap_or(0),
    };
    hp.seed = seed;
    let parallelism = match o.parallelism {
        Some(p) => p,
        None => get("parallelism").map(|v| scalar("parallelism", v)).transpose()?.unwrap_or(1),
    };
    if parallelism < 1 {
        return Err(config_err("parallelism", "must be >= 1"));
    }
    if let Some(l) = &o.loss {
        hp.loss_kind = l.parse::<LossKind>().map_err(|e| config_err("loss", e))?;
    }
    if let Some(f) = &o.fusion {
        hp.fusion_mode = f.parse::<FusionMode>().map_err(|e| config_err("fusion", e))?;
    }
    if let Some(t) = o.trials {
        space.trials = t;
    }
    if !o.members.is_empty() {
        ensemble.members = o.members.clone();
    }
    let split = match &o.split {
        Some(s) => Some(s.parse::<Split>().map_err(|e| config_err("split", e))?),
        None => get("split").map(|v| scalar("split", v)).transpose()?,
    };
    let path = |flag: &Option<PathBuf>, key: &str| -> Result<Option<PathBuf>, Failure> {
        match flag {
            Some(p) => Ok(Some(p.clone())),
            None => get(key).map(|v| scalar(key, v)).transpose(),
        }
    };
    let verbosity = match o.verbosity {
        0 => get("verbosity").map(|v| scalar("verbosity", v)).transpose()?.unwrap_or(0),
        v => v,
    };
    Ok(RunConfig {
        manifest: path(&o.manifest, "manifest")?,
        out: path(&o.out, "out")?.unwrap_or_else(|| PathBuf::from("out")),
        seed,
        parallelism,
        split,
        checkpoint: path(&o.checkpoint, "checkpoint")?,
        verbosity,
        hp,
        space,
        synth,
        ensemble,
    })
}

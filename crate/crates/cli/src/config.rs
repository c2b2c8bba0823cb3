//! Config files merged with flags (flags win), and the run manifest.

use std::fmt;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{Map, Value};
use timgan_core::editor::Variant;
use timgan_core::eval::EvalConfig;
use timgan_core::scenegen::DatasetConfig;
use timgan_core::training::TrainConfig;

/// A problem with the command line itself; exits with status 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_object(path: Option<&Path>) -> anyhow::Result<Map<String, Value>> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    match serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))? {
        Value::Object(map) => Ok(map),
        _ => Err(usage(format!("{} must hold a JSON object", path.display()))),
    }
}

/// Puts the flag's seed into `map`, or checks the file supplied one.
fn resolve_seed(map: &mut Map<String, Value>, seed: Option<u64>) -> anyhow::Result<u64> {
    if let Some(seed) = seed {
        map.insert("seed".into(), seed.into());
    }
    map.get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| usage("a seed is required: pass --seed or set \"seed\" in the config file"))
}

pub fn dataset_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<DatasetConfig> {
    let mut map = read_object(path)?;
    resolve_seed(&mut map, seed)?;
    map.entry("train").or_insert(2000.into());
    map.entry("test").or_insert(200.into());
    Ok(DatasetConfig::from_json(&Value::Object(map).to_string())?)
}

pub fn train_config(
    path: Option<&Path>,
    seed: Option<u64>,
    variant: Option<Variant>,
    tau: Option<f64>,
) -> anyhow::Result<TrainConfig> {
    let mut map = read_object(path)?;
    resolve_seed(&mut map, seed)?;
    if let Some(v) = variant {
        map.insert("variant".into(), serde_json::to_value(v)?);
    }
    if let Some(t) = tau {
        map.insert("tau".into(), t.into());
    }
    Ok(TrainConfig::from_value(Value::Object(map))?)
}

/// `fallback_seed` is the training seed recorded in the checkpoint, used when
/// neither the flag nor the file gives one.
pub fn eval_config(
    path: Option<&Path>,
    seed: Option<u64>,
    pool_size: Option<usize>,
    fallback_seed: Option<u64>,
) -> anyhow::Result<EvalConfig> {
    let mut map = read_object(path)?;
    if let (None, false, Some(s)) = (seed, map.contains_key("seed"), fallback_seed) {
        map.insert("seed".into(), s.into());
    }
    resolve_seed(&mut map, seed)?;
    if let Some(n) = pool_size {
        map.insert("pool_size".into(), n.into());
    }
    let cfg: EvalConfig = serde_json::from_value(Value::Object(map)).context("parsing the evaluation config")?;
    if cfg.pool_size == 0 || cfg.ns.is_empty() {
        return Err(usage("pool size and the list of ranks must be non-empty"));
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct RunManifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    config: &'a C,
}

/// Writes `run_manifest.json` into `dir`. The content depends only on the
/// inputs, so reruns produce identical bytes.
pub fn write_run_manifest<C: Serialize>(dir: &Path, command: &str, seed: u64, config: &C) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let manifest = RunManifest {
        command,
        version: crate::VERSION,
        seed,
        config,
    };
    let path = dir.join("run_manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

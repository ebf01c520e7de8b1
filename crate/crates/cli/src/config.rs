//! Resolution of the flat run config: file values, then flags given on the
//! command line, then flag defaults for keys the file leaves unset.

use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::ArgMatches;
use mmdet_core::detector::CONFIG_KEYS;
use mmdet_core::kv::KvMap;
use mmdet_core::trainer::TRAIN_KEYS;

/// Argument ids that name outputs or the config file itself rather than
/// config keys.
const NON_KEYS: [&str; 3] = ["config", "out", "metrics"];

const RUN_KEYS: [&str; 26] = [
    "count",
    "frames",
    "size",
    "fps",
    "grain",
    "corpus",
    "vq_steps",
    "vq_batch",
    "vq_lr",
    "codebook_size",
    "latent_dim",
    "beta",
    "vqvae",
    "jitter",
    "manifest",
    "provider",
    "sigma",
    "features",
    "provider_seed",
    "interval",
    "seeds",
    "stride",
    "split",
    "ckpt",
    "kind",
    "input",
];

pub fn is_known_key(key: &str) -> bool {
    RUN_KEYS.contains(&key) || CONFIG_KEYS.contains(&key) || TRAIN_KEYS.contains(&key)
}

/// Configuration problems are usage errors (exit 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn resolve(file: Option<&Path>, m: &ArgMatches) -> Result<KvMap, UsageError> {
    let mut kv = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?;
            KvMap::parse(&text).map_err(|e| UsageError(format!("config {}: {e}", p.display())))?
        }
        None => KvMap::default(),
    };
    if let Some(k) = kv.keys().find(|k| !is_known_key(k)) {
        return Err(UsageError(format!("unknown config key {k}")));
    }
    for id in m.ids() {
        let id = id.as_str();
        // argument groups and output paths are not config keys
        if NON_KEYS.contains(&id) || !is_known_key(id) {
            continue;
        }
        let Some(raw) = m.get_raw(id) else { continue };
        let value = raw.map(|v| v.to_string_lossy().into_owned()).collect::<Vec<_>>().join(",");
        match m.value_source(id) {
            Some(ValueSource::DefaultValue) if kv.get_str(id).is_some() => {}
            Some(_) => kv.set(id, value),
            None => {}
        }
    }
    Ok(kv)
}

pub fn require_seed(kv: &KvMap) -> Result<u64, UsageError> {
    kv.require("seed").map_err(|e| UsageError(format!("{e} (pass --seed or set seed in the config file)")))
}

pub fn path(kv: &KvMap, key: &str) -> Result<PathBuf, UsageError> {
    kv.get_str(key).map(PathBuf::from).ok_or_else(|| UsageError(format!("missing required key {key}")))
}

pub fn get<T: std::str::FromStr>(kv: &KvMap, key: &str, default: T) -> Result<T, UsageError> {
    kv.get_or(key, default).map_err(|e| UsageError(e.to_string()))
}

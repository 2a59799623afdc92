//! Run directories and manifests.
//!
//! Every mutating subcommand resolves a run directory under the working
//! root (the `PROMPTREC_HOME` environment variable, default `./runs`),
//! named `<command>-<first 12 hex of the config hash>` so identical
//! configurations land in identical places. `--out` overrides the location
//! but never the manifest. The manifest records the exact resolved
//! configuration, its hash, the seeds in play, and the crate versions, so
//! any output file can be traced back to a reproducible invocation.

use std::collections::BTreeMap;
use std::error::Error;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const HOME_ENV: &str = "PROMPTREC_HOME";
const DEFAULT_HOME: &str = "runs";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Working-directory root for run outputs.
pub fn home() -> PathBuf {
    std::env::var_os(HOME_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_HOME))
}

/// Hex-encoded SHA-256 of the canonical JSON form of a config.
pub fn config_hash(config: &impl Serialize) -> Result<String, Box<dyn Error>> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&json)))
}

/// A created run directory plus the hash that named it.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub config_hash: String,
}

/// What `manifest.json` holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub versions: BTreeMap<String, String>,
}

/// Resolve (and create) the run directory for a command + config, then
/// write its manifest. Returns the directory for the command's outputs.
pub fn create(
    command: &str,
    config: &impl Serialize,
    seeds: &BTreeMap<String, u64>,
    out: Option<&Path>,
) -> Result<RunDir, Box<dyn Error>> {
    let hash = config_hash(config)?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => home().join(format!("{command}-{}", &hash[..12])),
    };
    std::fs::create_dir_all(&path)?;
    let manifest = Manifest {
        command: command.to_string(),
        config_hash: hash.clone(),
        config: serde_json::to_value(config)?,
        seeds: seeds.clone(),
        versions: versions(),
    };
    write_json(&path.join(MANIFEST_FILE), &manifest)?;
    Ok(RunDir {
        path,
        config_hash: hash,
    })
}

fn versions() -> BTreeMap<String, String> {
    let mut v = BTreeMap::new();
    v.insert(
        "promptrec-cli".to_string(),
        env!("CARGO_PKG_VERSION").to_string(),
    );
    v.insert(
        "promptrec-core".to_string(),
        promptrec_core::VERSION.to_string(),
    );
    v
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), Box<dyn Error>> {
    let json = serde_json::to_string_pretty(value)?;
    std::fs::write(path, json)
        .map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Box<dyn Error>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let value = serde_json::from_str(&text)
        .map_err(|e| format!("cannot parse {}: {e}", path.display()))?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Cfg {
        alpha: u32,
        name: &'static str,
    }

    #[test]
    fn hash_is_deterministic_and_sensitive() {
        let a = config_hash(&Cfg { alpha: 1, name: "x" }).unwrap();
        let b = config_hash(&Cfg { alpha: 1, name: "x" }).unwrap();
        let c = config_hash(&Cfg { alpha: 2, name: "x" }).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
    }

    #[test]
    fn create_writes_a_manifest_with_versions() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("run");
        let seeds = BTreeMap::from([("main".to_string(), 7u64)]);
        let run = create("demo", &Cfg { alpha: 3, name: "y" }, &seeds, Some(&out)).unwrap();
        assert_eq!(run.path, out);
        let manifest: Manifest = read_json(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(manifest.command, "demo");
        assert_eq!(manifest.config_hash, run.config_hash);
        assert_eq!(manifest.seeds["main"], 7);
        assert!(manifest.versions.contains_key("promptrec-core"));
        assert_eq!(manifest.config["alpha"], 3);
    }
}

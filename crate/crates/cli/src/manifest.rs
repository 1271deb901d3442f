//! Run manifests: enough metadata to reproduce any command's outputs.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use factorhedge_core::Result;

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    schema_version: u32,
    command: &'a str,
    config: &'a C,
    config_hash: String,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
}

/// Hash of the resolved configuration; reruns with the same hash produce
/// byte-identical numeric outputs.
pub fn config_hash<C: Serialize>(config: &C) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

pub fn write_manifest<C: Serialize>(
    out_dir: &Path,
    command: &str,
    config: &C,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<()> {
    let manifest = Manifest {
        schema_version: 1,
        command,
        config,
        config_hash: config_hash(config)?,
        seed,
        inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), text)?;
    Ok(())
}

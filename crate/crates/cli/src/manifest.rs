//! Run manifests: config snapshot, seeds, a content hash of the running
//! binary, and a checksummed inventory of every artifact the run produced.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: crate::config::FileConfig,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of the executable that produced the run.
    pub code_hash: String,
    /// Relative artifact path -> SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(digest: &[u8]) -> String {
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn code_hash() -> String {
    std::env::current_exe()
        .ok()
        .and_then(|p| std::fs::read(p).ok())
        .map(|b| hex(&Sha256::digest(&b)))
        .unwrap_or_else(|| "unknown".into())
}

/// Walks the run directory, records every file except the manifest itself,
/// and writes `manifest.json`. Called last so the inventory is complete.
pub fn write_manifest(
    run_dir: &Path,
    command: &str,
    config: &crate::config::FileConfig,
    seeds: BTreeMap<String, u64>,
) -> Result<()> {
    let mut files = BTreeMap::new();
    collect(run_dir, run_dir, &mut files)?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.clone(),
        seeds,
        code_hash: code_hash(),
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(run_dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> =
        std::fs::read_dir(dir)?.collect::<std::io::Result<Vec<_>>>()?;
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        if path.is_dir() {
            collect(root, &path, out)?;
        } else if path.file_name().is_some_and(|n| n != "manifest.json") {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, sha256_file(&path)?);
        }
    }
    Ok(())
}

//! Per-command run manifests: inputs, seed, code version, timing and the
//! SHA-256 of every artifact under the run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use kgt_core::feature_bank::{file_sha256, write_atomic};
use serde::{Deserialize, Serialize};

pub const MANIFEST_DIR: &str = "manifests";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub dataset: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub git_describe: String,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub out: PathBuf,
    /// Path relative to `out` to SHA-256, for every file present when the
    /// command finished (other manifests excluded).
    pub artifacts: BTreeMap<String, String>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            if path == root.join(MANIFEST_DIR) {
                continue;
            }
            collect(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().replace('\\', "/");
            out.insert(rel, file_sha256(&path)?);
        }
    }
    Ok(())
}

pub fn hash_artifacts(root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if root.exists() {
        collect(root, root, &mut out).with_context(|| format!("hashing artifacts under {}", root.display()))?;
    }
    Ok(out)
}

impl RunManifest {
    pub fn write(&self) -> Result<PathBuf> {
        let dir = self.out.join(MANIFEST_DIR);
        std::fs::create_dir_all(&dir)?;
        let path = dir.join(format!("{}.json", self.command));
        write_atomic(&path, serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(path)
    }
}

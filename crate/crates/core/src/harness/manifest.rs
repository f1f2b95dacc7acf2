use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

/// Written last into every run directory. `config` embeds the resolved
/// configuration, so the manifest alone can re-run the experiment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub name: String,
    pub seed: u64,
    pub config_sha256: String,
    pub config: String,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

/// Every file under `dir` except the manifest, with forward-slash
/// relative paths in sorted order.
pub fn collect_artifacts(dir: &Path) -> Result<Vec<Artifact>, HarnessError> {
    let mut files = Vec::new();
    walk(dir, &mut files).map_err(|e| HarnessError::io(dir, e))?;
    let mut out = Vec::new();
    for f in files {
        let rel = f
            .strip_prefix(dir)
            .expect("walked from dir")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        if rel == MANIFEST_FILE {
            continue;
        }
        let bytes = fs::read(&f).map_err(|e| HarnessError::io(&f, e))?;
        out.push(Artifact {
            path: rel,
            sha256: sha256_hex(&bytes),
        });
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<(), HarnessError> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| HarnessError::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self, HarnessError> {
        let path = if dir.is_dir() {
            dir.join(MANIFEST_FILE)
        } else {
            dir.to_path_buf()
        };
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }
}

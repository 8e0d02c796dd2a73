use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use rkdea::kgdata::DATASET_FILES;
use rkdea::Result;

pub const TOOL_VERSION: &str = concat!("rkdea ", env!("CARGO_PKG_VERSION"));

/// Everything needed to reproduce a run. Contains no clocks or host details,
/// so equal manifests mean equal inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub rng_seed: u64,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_digest: Option<String>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

fn hash_file(hasher: &mut Sha256, path: &Path) -> Result<()> {
    let mut file = fs::File::open(path)?;
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            return Ok(());
        }
        hasher.update(&buf[..n]);
    }
}

/// SHA-256 over the name, length and bytes of each dataset file present.
pub fn dataset_digest(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in DATASET_FILES {
        let path = dir.join(name);
        if !path.exists() {
            continue;
        }
        hasher.update(name.as_bytes());
        hasher.update(fs::metadata(&path)?.len().to_le_bytes());
        hash_file(&mut hasher, &path)?;
    }
    Ok(hex::encode(hasher.finalize()))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    hash_file(&mut hasher, path)?;
    Ok(hex::encode(hasher.finalize()))
}

/// `t.rkda` -> `t.rkda.manifest.json`.
pub fn manifest_path_for(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    ckpt.with_file_name(name)
}

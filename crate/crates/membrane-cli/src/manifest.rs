//! Run manifest: configuration echo, grid, wall clock, termination reason
//! and digests of every emitted file. Written exactly once per run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct GridInfo {
    pub lmax: usize,
    pub nlat: usize,
    pub nlon: usize,
}

#[derive(Serialize)]
pub struct OutputDigest {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub artifact: &'static str,
    pub version: &'static str,
    pub command: String,
    pub seed: u64,
    pub grid: Option<GridInfo>,
    pub config: BTreeMap<String, String>,
    pub wall_clock_seconds: f64,
    pub termination: String,
    pub outputs: Vec<OutputDigest>,
    pub extra: BTreeMap<String, serde_json::Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn digest_outputs(base: &Path, files: &[PathBuf]) -> Vec<OutputDigest> {
        let mut out = Vec::new();
        for f in files {
            let Ok(bytes) = fs::read(f) else { continue };
            let mut hasher = Sha256::new();
            hasher.update(&bytes);
            let rel = f.strip_prefix(base).unwrap_or(f);
            out.push(OutputDigest {
                path: rel.display().to_string(),
                bytes: bytes.len() as u64,
                sha256: format!("{:x}", hasher.finalize()),
            });
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).context("serializing manifest")?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

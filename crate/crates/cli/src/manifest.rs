//! Run manifests: the resolved config, seeds and a hash of every artifact.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Path relative to the manifest's directory.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Merged config (file plus overrides) as TOML.
    pub config: Option<String>,
    pub seeds: Vec<u64>,
    pub parameters: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let mut f = fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut total = 0u64;
    loop {
        let n = f.read(&mut buf).with_context(|| format!("cannot read {}", path.display()))?;
        if n == 0 {
            break;
        }
        total += n as u64;
        h.update(&buf[..n]);
    }
    Ok((total, hex::encode(h.finalize())))
}

fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("cannot list {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            walk(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

impl Manifest {
    pub fn new(command: &str, config: Option<String>, seeds: Vec<u64>, parameters: serde_json::Value) -> Self {
        Self {
            tool: "pathstar".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config,
            seeds,
            parameters,
            artifacts: Vec::new(),
        }
    }

    /// Hashes `files`, recording paths relative to `base`.
    pub fn add_files(&mut self, base: &Path, files: &[PathBuf]) -> Result<()> {
        for f in files {
            let (bytes, sha256) = sha256_file(f)?;
            let rel = f.strip_prefix(base).unwrap_or(f);
            self.artifacts.push(Artifact { path: rel.to_string_lossy().replace('\\', "/"), bytes, sha256 });
        }
        Ok(())
    }

    /// Hashes every file under `dir` except `skip`.
    pub fn add_tree(&mut self, dir: &Path, skip: &Path) -> Result<()> {
        let mut files = Vec::new();
        walk(dir, &mut files)?;
        files.retain(|f| f != skip);
        self.add_files(dir, &files)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("cannot write manifest {}", path.display()))
    }
}

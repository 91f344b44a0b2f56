//! Run-directory writer: every artifact is hashed as it is written and the
//! manifest lists them all, so reproducibility can be checked by comparing
//! manifests byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use cylgp::util::sha256_hex;
use serde::Serialize;

#[derive(Serialize)]
struct ArtifactRecord {
    sha256: String,
    bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config_sha256: &'a str,
    artifacts: BTreeMap<String, ArtifactRecord>,
}

pub struct RunWriter {
    dir: PathBuf,
    records: BTreeMap<String, ArtifactRecord>,
}

impl RunWriter {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), records: BTreeMap::new() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.records.insert(
            rel.to_string(),
            ArtifactRecord { sha256: sha256_hex(bytes), bytes: bytes.len() },
        );
        Ok(())
    }

    pub fn write_string(&mut self, rel: &str, text: &str) -> Result<()> {
        self.write_bytes(rel, text.as_bytes())
    }

    /// Build an artifact in memory through a writer, then persist it.
    pub fn write_with(&mut self, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write_bytes(rel, &buf)
    }

    /// Write the manifest last; it lists every artifact with its hash.
    pub fn finish(self, command: &str, seed: u64, config_toml: &str) -> Result<()> {
        let manifest = Manifest {
            command,
            seed,
            config_sha256: &sha256_hex(config_toml.as_bytes()),
            artifacts: self.records,
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(self.dir.join("manifest.json"), text)?;
        Ok(())
    }
}

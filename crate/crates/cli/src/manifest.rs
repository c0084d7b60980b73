//! Per-stage run manifest: inputs, seed, tool version, artifact digests and
//! timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::failure::{CliResult, Classify};

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub stage: String,
    pub seed: u64,
    /// Digest of the canonical JSON of the stage configuration.
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: Vec<Artifact>,
    /// Wall-clock timings; the only non-reproducible content.
    pub timings_ms: BTreeMap<String, u128>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_sha256(path: &Path) -> std::io::Result<(String, u64)> {
    let bytes = std::fs::read(path)?;
    Ok((sha256_hex(&bytes), bytes.len() as u64))
}

pub struct ManifestBuilder {
    manifest: RunManifest,
    out_dir: PathBuf,
    started: Instant,
    files: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(stage: &str, out_dir: &Path, seed: u64, config: &impl Serialize) -> Self {
        let config_json = serde_json::to_vec(config).expect("config serializes");
        ManifestBuilder {
            manifest: RunManifest {
                tool: "fpp",
                version: env!("CARGO_PKG_VERSION"),
                stage: stage.to_string(),
                seed,
                config_sha256: sha256_hex(&config_json),
                inputs: BTreeMap::new(),
                artifacts: Vec::new(),
                timings_ms: BTreeMap::new(),
            },
            out_dir: out_dir.to_path_buf(),
            started: Instant::now(),
            files: Vec::new(),
        }
    }

    pub fn input(&mut self, name: &str, path: &Path) -> CliResult<()> {
        let (digest, _) = file_sha256(path).config_err(format!("reading input {}", path.display()))?;
        self.manifest.inputs.insert(name.to_string(), digest);
        Ok(())
    }

    pub fn artifact(&mut self, path: PathBuf) {
        self.files.push(path);
    }

    pub fn timing(&mut self, name: &str, since: Instant) {
        self.manifest.timings_ms.insert(name.to_string(), since.elapsed().as_millis());
    }

    /// Hashes every artifact and writes `manifest.json` into the output directory.
    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.files.sort();
        for f in &self.files {
            let (sha256, bytes) = file_sha256(f).stage_err(&self.manifest.stage)?;
            let rel = f.strip_prefix(&self.out_dir).unwrap_or(f);
            self.manifest.artifacts.push(Artifact { path: rel.to_string_lossy().replace('\\', "/"), sha256, bytes });
        }
        self.manifest.timings_ms.insert("total".into(), self.started.elapsed().as_millis());
        let path = self.out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(&path, json).stage_err(&self.manifest.stage)?;
        Ok(path)
    }
}

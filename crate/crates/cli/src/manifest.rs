//! Run manifests: provenance sidecars written next to every artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input file name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Wall-clock milliseconds per step of the stage; not hashed.
    pub timings_ms: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(stage: &str, cfg: &PipelineConfig) -> Self {
        let seeds = BTreeMap::from([
            ("world".to_string(), cfg.world.rng_seed),
            ("mixture".to_string(), cfg.corpus.mixture.rng_seed),
            ("masking".to_string(), cfg.corpus.masking.rng_seed),
            ("train".to_string(), cfg.train.rng_seed),
            ("eval".to_string(), cfg.eval.rng_seed),
        ]);
        Self {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: cfg.hash(),
            seeds,
            inputs: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    /// Records the digest of an input file.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.input_bytes(path, &bytes);
        Ok(bytes)
    }

    pub fn input_bytes(&mut self, path: &Path, bytes: &[u8]) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.inputs.insert(name, sha256_hex(bytes));
    }

    pub fn time(&mut self, step: &str, since: Instant) {
        self.timings_ms.insert(step.to_string(), since.elapsed().as_secs_f64() * 1e3);
    }

    /// Hash over everything except timings.
    pub fn hash(&self) -> String {
        let mut m = self.clone();
        m.timings_ms.clear();
        sha256_hex(serde_json::to_string(&m).expect("manifest serializes").as_bytes())
    }

    /// Writes `<artifact>.manifest.json`.
    pub fn write_sidecar(&self, artifact: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Sidecar<'a> {
            manifest_hash: String,
            #[serde(flatten)]
            manifest: &'a RunManifest,
        }
        let path = sidecar_path(artifact);
        let body = serde_json::to_string_pretty(&Sidecar { manifest_hash: self.hash(), manifest: self })?;
        std::fs::write(&path, body + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sidecar_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}

/// Reads the manifest hash recorded next to `artifact`.
pub fn read_sidecar_hash(artifact: &Path) -> Result<String> {
    let path = sidecar_path(artifact);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(v["manifest_hash"].as_str().unwrap_or_default().to_string())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

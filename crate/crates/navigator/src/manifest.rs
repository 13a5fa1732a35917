//! Run manifests: every CLI run records its resolved configuration, root
//! seed, and output hashes next to its outputs, so any artifact can be
//! re-derived bit-exactly by `replay`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad manifest {path}: {message}")]
    Bad { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: u64,
    /// Fully resolved run configuration (self-contained for replay).
    pub config: serde_json::Value,
    pub config_hash: String,
    /// External input files consumed by the run: path -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output files produced by the run: file name -> sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("sha256:{}", hex::encode(hasher.finalize()))
}

pub fn hash_file(path: &Path) -> Result<String, ManifestError> {
    let bytes = std::fs::read(path).map_err(|source| ManifestError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Ok(sha256_hex(&bytes))
}

impl RunManifest {
    pub fn new<C: Serialize>(subcommand: &str, seed: u64, config: &C) -> Self {
        let config = serde_json::to_value(config).expect("config serialization cannot fail");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        Self {
            schema: "v1".into(),
            tool: "navigator".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            seed,
            config,
            config_hash,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn record_input(&mut self, path: &Path) -> Result<(), ManifestError> {
        let hash = hash_file(path)?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    pub fn record_output(&mut self, name: &str, path: &Path) -> Result<(), ManifestError> {
        let hash = hash_file(path)?;
        self.outputs.insert(name.to_string(), hash);
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<(), ManifestError> {
        let path = dir.join(MANIFEST_FILE);
        let body = serde_json::to_string_pretty(self).expect("manifest serialization");
        std::fs::write(&path, body).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let manifest: RunManifest =
            serde_json::from_str(&text).map_err(|e| ManifestError::Bad {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        if manifest.schema != "v1" {
            return Err(ManifestError::Bad {
                path: path.display().to_string(),
                message: format!("unsupported schema '{}'", manifest.schema),
            });
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct DemoConfig {
        steps: usize,
        alpha: f64,
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data.txt");
        std::fs::write(&out, "hello").unwrap();
        let mut manifest = RunManifest::new("train", 42, &DemoConfig { steps: 3, alpha: 0.25 });
        manifest.record_output("data.txt", &out).unwrap();
        manifest.write(dir.path()).unwrap();
        let back = RunManifest::read(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
        assert_eq!(back.outputs["data.txt"], sha256_hex(b"hello"));
        assert_eq!(back.seed, 42);
    }

    #[test]
    fn config_hash_tracks_config() {
        let a = RunManifest::new("train", 1, &DemoConfig { steps: 3, alpha: 0.25 });
        let b = RunManifest::new("train", 1, &DemoConfig { steps: 4, alpha: 0.25 });
        assert_ne!(a.config_hash, b.config_hash);
    }

    #[test]
    fn hash_file_matches_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x");
        std::fs::write(&path, b"abc").unwrap();
        assert_eq!(hash_file(&path).unwrap(), sha256_hex(b"abc"));
    }
}

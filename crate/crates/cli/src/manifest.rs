//! Run manifests: every command that writes outputs drops exactly one
//! `manifest.json` next to them, recording what produced the outputs — the
//! argv, the master seed, content hashes of every input, and artifact
//! versions — so a run can be reproduced (or recognized as stale) from the
//! manifest alone.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use framesynth_core::checkpoint::FORMAT_VERSION;
use framesynth_core::error::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

type Result<T> = std::result::Result<T, Error>;

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    /// The full invocation, argv[0] included.
    pub argv: Vec<String>,
    pub seed: u64,
    pub threads: usize,
    /// SHA-256 of the fully resolved configuration (defaults + file +
    /// flags), when the command has one.
    pub config_sha256: Option<String>,
    /// SHA-256 per named input: datasets, checkpoints, images.
    pub input_sha256: BTreeMap<String, String>,
    pub artifact_versions: BTreeMap<String, String>,
    pub wallclock_ms: u64,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, threads: usize) -> RunManifest {
        let mut artifact_versions = BTreeMap::new();
        artifact_versions
            .insert("framesynth".to_string(), env!("CARGO_PKG_VERSION").to_string());
        artifact_versions
            .insert("checkpoint_format".to_string(), FORMAT_VERSION.to_string());
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed,
            threads,
            config_sha256: None,
            input_sha256: BTreeMap::new(),
            artifact_versions,
            wallclock_ms: 0,
        }
    }

    pub fn config(&mut self, resolved_kv: &str) -> &mut Self {
        self.config_sha256 = Some(sha256_hex(resolved_kv.as_bytes()));
        self
    }

    pub fn input_file(&mut self, name: &str, path: &Path) -> Result<&mut Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_sha256.insert(name.to_string(), sha256_hex(&bytes));
        Ok(self)
    }

    pub fn input_dataset(&mut self, name: &str, dir: &Path) -> Result<&mut Self> {
        self.input_sha256.insert(name.to_string(), hash_dataset(dir)?);
        Ok(self)
    }

    /// Stamps the wallclock and writes `manifest.json` under `out_dir`.
    pub fn write(&mut self, out_dir: &Path, started: Instant) -> Result<()> {
        self.wallclock_ms = started.elapsed().as_millis() as u64;
        let path = out_dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(&path, format!("manifest serialization failed: {e}")))?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Content hash of a dataset directory: `meta.jsonl` plus every frame under
/// `pairs/`, each fed as (relative path, contents) in sorted order. The
/// manifest the generator wrote is deliberately not part of the hash (it
/// contains its own wallclock).
pub fn hash_dataset(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut feed = |rel: &str, path: &Path| -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        h.update(rel.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    feed("meta.jsonl", &dir.join("meta.jsonl"))?;
    let pairs = dir.join("pairs");
    let mut names: Vec<String> = fs::read_dir(&pairs)
        .map_err(|e| Error::io(&pairs, e))?
        .map(|entry| {
            entry
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .map_err(|e| Error::io(&pairs, e))
        })
        .collect::<Result<_>>()?;
    names.sort();
    for name in &names {
        feed(&format!("pairs/{name}"), &pairs.join(name))?;
    }
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    Ok(s)
}

//! Artifact persistence: line-delimited JSON records, versioned binary
//! checkpoints, and per-step manifests with content hashes.

use crate::error::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

/// Write one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut file = fs::File::create(path)?;
    for r in records {
        let line = serde_json::to_string(r)?;
        file.write_all(line.as_bytes())?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| {
        Error::MissingDependency(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            Error::Serde(format!("{}:{}: {e}", path.display(), i + 1))
        })?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::MissingDependency(format!("cannot open {}: {e}", path.display()))
    })?;
    Ok(serde_json::from_str(&text)?)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"PREFCOND";

/// Single-blob checkpoint: magic, format version, a kind tag, then the JSON
/// payload. The header is what guards against loading the wrong artifact.
pub fn save_checkpoint<T: Serialize>(
    path: &Path,
    kind: &str,
    version: u32,
    payload: &T,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&version.to_le_bytes());
    let kind_bytes = kind.as_bytes();
    if kind_bytes.len() > 24 {
        return Err(Error::validation("checkpoint kind tag too long"));
    }
    let mut tag = [0u8; 24];
    tag[..kind_bytes.len()].copy_from_slice(kind_bytes);
    bytes.extend_from_slice(&tag);
    bytes.extend_from_slice(serde_json::to_string(payload)?.as_bytes());
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<T: DeserializeOwned>(
    path: &Path,
    kind: &str,
    version: u32,
) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| {
        Error::MissingDependency(format!("cannot open {}: {e}", path.display()))
    })?;
    if bytes.len() < 36 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::validation(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let got_version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if got_version != version {
        return Err(Error::validation(format!(
            "checkpoint version {got_version}, expected {version}"
        )));
    }
    let tag_end = bytes[12..36].iter().position(|&b| b == 0).unwrap_or(24);
    let got_kind = std::str::from_utf8(&bytes[12..12 + tag_end])
        .map_err(|_| Error::validation("checkpoint kind tag is not UTF-8"))?;
    if got_kind != kind {
        return Err(Error::validation(format!(
            "checkpoint kind '{got_kind}', expected '{kind}'"
        )));
    }
    Ok(serde_json::from_slice(&bytes[36..])?)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Per-step artifact inventory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub step: String,
    pub seed: u64,
    pub config_hash: String,
    pub counts: std::collections::BTreeMap<String, u64>,
    pub artifacts: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(step: &str, seed: u64, config_hash: &str) -> Self {
        Manifest {
            step: step.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            counts: Default::default(),
            artifacts: Vec::new(),
        }
    }

    pub fn count(&mut self, key: &str, value: u64) {
        self.counts.insert(key.to_string(), value);
    }

    /// Hash an artifact and record it relative to the step directory.
    pub fn record(&mut self, step_dir: &Path, file_name: &str) -> Result<()> {
        let path = step_dir.join(file_name);
        let meta = fs::metadata(&path)?;
        self.artifacts.push(ManifestEntry {
            path: file_name.to_string(),
            sha256: sha256_file(&path)?,
            bytes: meta.len(),
        });
        Ok(())
    }

    pub fn write(&self, step_dir: &Path) -> Result<PathBuf> {
        let path = step_dir.join("manifest.json");
        write_json(&path, self)?;
        Ok(path)
    }
}

/// Verify that a step directory's files and manifest agree exactly:
/// every non-manifest file appears once with a matching hash.
pub fn verify_manifest(step_dir: &Path) -> Result<()> {
    let manifest: Manifest = read_json(&step_dir.join("manifest.json"))?;
    let mut listed: std::collections::BTreeMap<&str, &ManifestEntry> = Default::default();
    for e in &manifest.artifacts {
        if listed.insert(e.path.as_str(), e).is_some() {
            return Err(Error::validation(format!(
                "artifact {} listed twice in manifest",
                e.path
            )));
        }
    }
    let mut on_disk = Vec::new();
    for entry in fs::read_dir(step_dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().to_string();
        if name == "manifest.json" {
            continue;
        }
        on_disk.push(name);
    }
    for name in &on_disk {
        let Some(e) = listed.get(name.as_str()) else {
            return Err(Error::validation(format!(
                "file {name} present but not in manifest"
            )));
        };
        let actual = sha256_file(&step_dir.join(name))?;
        if actual != e.sha256 {
            return Err(Error::validation(format!("hash mismatch for {name}")));
        }
    }
    if on_disk.len() != listed.len() {
        return Err(Error::validation(format!(
            "manifest lists {} artifacts but {} files exist",
            listed.len(),
            on_disk.len()
        )));
    }
    Ok(())
}

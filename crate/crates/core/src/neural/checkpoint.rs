//! Checkpoint directories: `manifest.json` plus one little-endian `f32`
//! file per named parameter.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    /// Model family ("jscc", "extractor", ...).
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab_hash: String,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    /// Family-specific metadata (bound knowledge-base hash, etc.).
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
        .collect();
    format!("{safe}.bin")
}

pub fn save(
    dir: &Path,
    kind: &str,
    config: serde_json::Value,
    vocab_hash: &str,
    step: u64,
    store: &ParamStore<f32>,
    extra: serde_json::Value,
) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        let file = file_name(name);
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(dir.join(&file), bytes)?;
        params.push(ParamEntry {
            name: name.to_string(),
            shape: [t.rows(), t.cols()],
            file,
        });
    }
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        config,
        vocab_hash: vocab_hash.to_string(),
        step,
        params,
        extra,
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Overwrites every tensor of `store` from the checkpoint in `dir`.
/// Names and shapes must match exactly.
pub fn load_into(dir: &Path, manifest: &CheckpointManifest, store: &mut ParamStore<f32>) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let id = store.find(&entry.name).ok_or_else(|| {
            Error::Checkpoint(format!("unexpected parameter {} in checkpoint", entry.name))
        })?;
        let expected = store.get(id).shape();
        if expected != (entry.shape[0], entry.shape[1]) {
            return Err(Error::Checkpoint(format!(
                "parameter {} has shape {:?}, model expects {:?}",
                entry.name, entry.shape, expected
            )));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if bytes.len() != entry.shape[0] * entry.shape[1] * 4 {
            return Err(Error::Checkpoint(format!(
                "parameter file {} has {} bytes",
                entry.file,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        *store.get_mut(id) = Tensor::from_vec(entry.shape[0], entry.shape[1], data);
    }
    Ok(())
}

/// SHA-256 over the manifest and every parameter file, hex encoded.
pub fn directory_hash(dir: &Path) -> Result<String> {
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(dir.join(MANIFEST_FILE))?);
    for p in &manifest.params {
        h.update(fs::read(dir.join(&p.file))?);
    }
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_then_load_restores_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("enc.0/w", Tensor::from_vec(2, 3, vec![1.0, -2.5, 3.25, 0.0, 1e-7, -0.0]));
        store.add("bias", Tensor::from_vec(1, 2, vec![f32::MAX, f32::MIN_POSITIVE]));
        let m = save(dir.path(), "test", serde_json::json!({"a": 1}), "abc", 7, &store, serde_json::Value::Null).unwrap();
        let bytes = fs::read(dir.path().join(&m.params[0].file)).unwrap();
        assert_eq!(&bytes[4..8], &(-2.5f32).to_le_bytes());

        let mut fresh = ParamStore::<f32>::new();
        fresh.add("enc.0/w", Tensor::zeros(2, 3));
        fresh.add("bias", Tensor::zeros(1, 2));
        let read = read_manifest(dir.path()).unwrap();
        assert_eq!(read, m);
        load_into(dir.path(), &read, &mut fresh).unwrap();
        assert_eq!(fresh.tensors(), store.tensors());
        assert_eq!(directory_hash(dir.path()).unwrap().len(), 64);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::zeros(2, 2));
        let m = save(dir.path(), "t", serde_json::Value::Null, "", 0, &store, serde_json::Value::Null).unwrap();
        let mut other = ParamStore::<f32>::new();
        other.add("w", Tensor::zeros(3, 2));
        assert!(load_into(dir.path(), &m, &mut other).is_err());
    }
}

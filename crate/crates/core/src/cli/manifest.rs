use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::{Invocation, MANIFEST_FILE, SNAPSHOT_FILE};
use crate::error::{Error, Result};
use crate::neural::checkpoint::hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to rerun a command: the command, its inputs with their
/// hashes, the full flattened configuration, and hashes of what it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub inputs: BTreeMap<String, InputRecord>,
    pub flags: BTreeMap<String, bool>,
    pub config: BTreeMap<String, serde_json::Value>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn record(inv: &Invocation, input_hashes: BTreeMap<String, String>) -> Result<Self> {
        let inputs = inv
            .inputs
            .iter()
            .map(|(k, p)| {
                let path = fs::canonicalize(p).unwrap_or_else(|_| p.clone());
                (
                    k.clone(),
                    InputRecord {
                        path,
                        sha256: input_hashes[k].clone(),
                    },
                )
            })
            .collect();
        let mut outputs = BTreeMap::new();
        for file in files_under(&inv.out)? {
            let rel = file.strip_prefix(&inv.out).expect("walked from out").to_string_lossy().replace('\\', "/");
            if rel == MANIFEST_FILE {
                continue;
            }
            outputs.insert(rel, hex(&Sha256::digest(fs::read(&file)?)));
        }
        Ok(Manifest {
            command: inv.command.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: inv.config.seed,
            inputs,
            flags: inv.flags.clone(),
            config: inv.config.to_flat()?,
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read manifest {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Rebuilds an invocation from a manifest, refusing inputs whose content
/// changed since the recorded run.
pub(super) fn replay_invocation(path: &Path, out: PathBuf) -> Result<Invocation> {
    let m = Manifest::read(path)?;
    let mut inputs = BTreeMap::new();
    for (name, rec) in &m.inputs {
        let now = hash_path(&rec.path)?;
        if now != rec.sha256 {
            return Err(Error::InvalidArgument(format!(
                "input {name} ({}) changed since the recorded run",
                rec.path.display()
            )));
        }
        inputs.insert(name.clone(), rec.path.clone());
    }
    Ok(Invocation {
        command: m.command,
        inputs,
        flags: m.flags,
        config: RunConfig::from_explicit(m.config)?,
        out,
    })
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 of a file, or of a directory's relative file names and contents.
/// A run directory's own manifest is skipped since it records where the run
/// wrote.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(hex(&Sha256::digest(fs::read(path)?)));
    }
    let mut h = Sha256::new();
    for file in files_under(path)? {
        let parent = file.parent().expect("file has a parent");
        if file.file_name().is_some_and(|n| n == MANIFEST_FILE) && parent.join(SNAPSHOT_FILE).exists() {
            continue;
        }
        let rel = file.strip_prefix(path).expect("walked from path").to_string_lossy().replace('\\', "/");
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(fs::read(&file)?);
    }
    Ok(hex(&h.finalize()))
}

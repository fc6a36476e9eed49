//! Run manifests: what a subcommand read, how it was configured, and a
//! digest of everything it wrote.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Command;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub tool_version: String,
    /// The invocation, with paths made absolute.
    pub command: Command,
    /// Full config snapshot in `key = value` form.
    pub config: String,
    pub seed: u64,
    pub threads: usize,
    /// Absolute input paths.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Digests of `path`, or of every file directly inside it (sorted, the
/// manifest itself excluded) when it is a directory.
pub fn digest_input(path: &Path) -> Result<Vec<FileDigest>> {
    let files = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST_FILE));
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    files
        .iter()
        .map(|f| {
            Ok(FileDigest {
                path: f.display().to_string(),
                sha256: sha256_file(f)?,
            })
        })
        .collect()
}

pub fn digest_outputs(dir: &Path, files: &[String]) -> Result<Vec<FileDigest>> {
    files
        .iter()
        .map(|f| {
            Ok(FileDigest {
                path: f.clone(),
                sha256: sha256_file(&dir.join(f))?,
            })
        })
        .collect()
}

impl Manifest {
    pub fn new(command: Command, config: String, seed: u64, threads: usize) -> Self {
        Self {
            format: FORMAT,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command,
            config,
            seed,
            threads,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read manifest {}: {e}", path.display())))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("bad manifest {}: {e}", path.display())))?;
        if m.format != FORMAT {
            return Err(Error::Config(format!("manifest format {} not supported", m.format)));
        }
        Ok(m)
    }

    /// Inputs whose current digest differs from the recorded one.
    pub fn changed_inputs(&self) -> Result<Vec<String>> {
        let mut changed = Vec::new();
        for d in &self.inputs {
            let path = Path::new(&d.path);
            if !path.is_file() || sha256_file(path)? != d.sha256 {
                changed.push(d.path.clone());
            }
        }
        Ok(changed)
    }
}

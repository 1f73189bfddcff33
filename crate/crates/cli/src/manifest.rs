//! Run manifests: what ran, with which resolved settings, and the hashes of
//! everything it read and wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    /// Fully resolved settings; `kpdet rerun` executes exactly this.
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileRecord>,
    /// Paths relative to the output root.
    pub outputs: Vec<FileRecord>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config).expect("settings serialize"),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) -> &mut Self {
        self.seeds.insert(name.to_string(), value);
        self
    }

    pub fn time(&mut self, phase: &str, since: Instant) {
        self.timings.insert(phase.to_string(), since.elapsed().as_secs_f64());
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            for f in list_files(path)? {
                self.inputs.push(record(&f, &f.display().to_string())?);
            }
        } else {
            self.inputs.push(record(path, &path.display().to_string())?);
        }
        Ok(())
    }

    /// Records every file under `root` except manifests.
    pub fn add_output_tree(&mut self, root: &Path) -> Result<()> {
        for f in list_files(root)? {
            if f.file_name().is_some_and(|n| n == MANIFEST_NAME) {
                continue;
            }
            let rel = f.strip_prefix(root).unwrap_or(&f);
            self.outputs.push(record(&f, &slash_path(rel))?);
        }
        Ok(())
    }

    pub fn add_output_file(&mut self, root: &Path, file: &Path) -> Result<()> {
        let rel = file.strip_prefix(root).unwrap_or(file);
        self.outputs.push(record(file, &slash_path(rel))?);
        Ok(())
    }

    /// Hash over output names and contents; equal digests mean identical outputs.
    pub fn outputs_digest(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.outputs {
            h.update(r.path.as_bytes());
            h.update([0]);
            h.update(r.sha256.as_bytes());
            h.update([b'\n']);
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| CliError::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::file(path, e))?;
        serde_json::from_str(&text).map_err(|source| CliError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn slash_path(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn sha256_file(path: &Path) -> Result<(u64, String)> {
    let bytes = fs::read(path).map_err(|e| CliError::file(path, e))?;
    Ok((bytes.len() as u64, hex::encode(Sha256::digest(&bytes))))
}

fn record(path: &Path, name: &str) -> Result<FileRecord> {
    let (bytes, sha256) = sha256_file(path)?;
    Ok(FileRecord {
        path: name.to_string(),
        bytes,
        sha256,
    })
}

/// All regular files below `root`, sorted.
pub fn list_files(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| CliError::file(&dir, e))? {
            let path = entry.map_err(|e| CliError::file(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

//! Run manifest: what was run, with which options, on which bytes.

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub seed: u64,
    pub jobs: Option<usize>,
    pub options: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn digest_file(path: &Path) -> Result<FileDigest, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(FileDigest { path: path.display().to_string(), sha256: sha256_hex(&bytes) })
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, jobs: Option<usize>, options: serde_json::Value) -> Self {
        Self {
            tool: "flatstream",
            version: env!("CARGO_PKG_VERSION"),
            subcommand: subcommand.to_string(),
            seed,
            jobs,
            options,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Digests files the run read or wrote; directories are walked in
    /// sorted order.
    pub fn record(paths: &[PathBuf]) -> Result<Vec<FileDigest>, CliError> {
        let mut out = Vec::new();
        for p in paths {
            if p.is_dir() {
                let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                    .map_err(|e| CliError::io(p, e))?
                    .map(|e| e.map(|e| e.path()).map_err(|err| CliError::io(p, err)))
                    .collect::<Result<_, _>>()?;
                entries.sort();
                out.extend(Self::record(&entries)?);
            } else {
                out.push(digest_file(p)?);
            }
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
    }
}

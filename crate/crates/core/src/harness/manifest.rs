use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::cli::Command;
use super::config::Config;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<FileDigest> {
        let bytes = std::fs::read(path).map_err(|e| missing(path, e))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        })
    }
}

fn missing(path: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingArtifact {
            path: path.to_path_buf(),
            detail: "file not found".into(),
        }
    } else {
        Error::Io(e)
    }
}

/// Everything needed to re-run a command and check its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: Command,
    pub config: Config,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// SHA-256 over the command, the config snapshot and the input digests.
    pub content_hash: String,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn content_hash(command: &Command, config: &Config, inputs: &[FileDigest]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(command).expect("command serializes"));
    h.update(config.to_text().as_bytes());
    for d in inputs {
        h.update(d.path.to_string_lossy().as_bytes());
        h.update(d.sha256.as_bytes());
    }
    hex::encode(h.finalize())
}

impl RunManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| missing(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.display().to_string(),
            offset: byte_offset(&text, e.line(), e.column()),
            msg: format!("not a run manifest: {e}"),
        })
    }

    /// Outputs whose current content differs from the recorded digest.
    pub fn changed_outputs(&self) -> Result<Vec<PathBuf>> {
        let mut changed = Vec::new();
        for d in &self.outputs {
            if FileDigest::of(&d.path)?.sha256 != d.sha256 {
                changed.push(d.path.clone());
            }
        }
        Ok(changed)
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let before: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    before + column.saturating_sub(1)
}

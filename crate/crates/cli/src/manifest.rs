//! Run manifests: config snapshot, input and output digests, wall-clock
//! time and the ground-truth access audit of every training run.
//!
//! File digests are git-style: SHA-256 over `"blob <len>\0"` followed by the
//! file bytes. The artifact digest is SHA-256 over one `"<digest> <path>\n"`
//! line per output, sorted by path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn blob_digest(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path, recorded_as: String) -> std::io::Result<Self> {
        Ok(FileDigest {
            path: recorded_as,
            sha256: blob_digest(&fs::read(path)?),
        })
    }
}

/// Ground-truth access record of one training run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub run: String,
    pub labeled_samples: usize,
    pub unlabeled_samples: usize,
    /// Whether the unlabeled ground truth stayed sealed throughout training.
    pub unlabeled_sealed: bool,
    pub forbidden_attempts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub precision: String,
    pub config: serde_json::Value,
    pub dataset: FileDigest,
    pub test_dataset: Option<FileDigest>,
    /// Paths relative to the manifest's directory.
    pub outputs: Vec<FileDigest>,
    pub artifact_digest: String,
    pub duration_secs: f64,
    pub audit: Vec<AccessAudit>,
    pub notes: Vec<String>,
}

pub fn artifact_digest(outputs: &[FileDigest]) -> String {
    let mut sorted: Vec<&FileDigest> = outputs.iter().collect();
    sorted.sort_by(|a, b| a.path.cmp(&b.path));
    let mut h = Sha256::new();
    for f in sorted {
        h.update(format!("{} {}\n", f.sha256, f.path).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Digests of `names` inside `dir`.
pub fn digest_outputs(dir: &Path, names: &[&str]) -> std::io::Result<Vec<FileDigest>> {
    names
        .iter()
        .map(|n| FileDigest::of(&dir.join(n), n.to_string()))
        .collect()
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        fs::write(
            &path,
            serde_json::to_string_pretty(self).map_err(std::io::Error::other)?,
        )?;
        Ok(path)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        serde_json::from_str(&fs::read_to_string(path)?).map_err(std::io::Error::other)
    }

    /// Recomputes every output digest and the artifact digest. Returns the
    /// list of mismatches, empty when the outputs are intact.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        for f in &self.outputs {
            match fs::read(dir.join(&f.path)) {
                Ok(bytes) if blob_digest(&bytes) == f.sha256 => {}
                Ok(_) => problems.push(format!("{}: digest mismatch", f.path)),
                Err(e) => problems.push(format!("{}: {e}", f.path)),
            }
        }
        if artifact_digest(&self.outputs) != self.artifact_digest {
            problems.push("artifact digest does not match the output list".into());
        }
        problems
    }
}

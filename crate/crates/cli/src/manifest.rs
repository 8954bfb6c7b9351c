//! Content-hashed run manifests. Wall-clock timings go to a separate
//! `timings.json`, the one output that is not reproducible and not hashed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const TIMINGS: &str = "timings.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    /// Slash-separated path relative to the directory it was listed from.
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputHash {
    pub role: String,
    /// File name only, so manifests do not depend on where inputs live.
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every resolved setting, defaults included.
    pub config: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub dataset_sha256: Option<String>,
    pub inputs: Vec<InputHash>,
    pub outputs: Vec<FileHash>,
    pub timings_file: String,
}

impl ExperimentManifest {
    pub fn new(command: &str) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: BTreeMap::new(),
            seeds: BTreeMap::new(),
            dataset_sha256: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings_file: TIMINGS.into(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<(), CliError> {
        self.inputs.push(InputHash {
            role: role.into(),
            file: path
                .file_name()
                .map_or_else(String::new, |f| f.to_string_lossy().into_owned()),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Hash the outputs under `dir` and write the manifest there.
    pub fn finish(mut self, dir: &Path) -> Result<Self, CliError> {
        self.outputs = hash_tree(dir)?;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        fs::write(dir.join(MANIFEST), text + "\n").map_err(|e| CliError::io(&dir.join(MANIFEST), e))?;
        Ok(self)
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    Ok(sha256_bytes(&fs::read(path).map_err(|e| CliError::io(path, e))?))
}

/// Hash of a dataset directory: `meta.csv` then `images.bin`.
pub fn dataset_hash(dir: &Path) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for name in ["meta.csv", "images.bin"] {
        let p = dir.join(name);
        h.update(fs::read(&p).map_err(|e| CliError::io(&p, e))?);
    }
    Ok(format!("{:x}", h.finalize()))
}

/// Every file under `dir` except the top-level manifest and any timings file,
/// sorted by path.
pub fn hash_tree(dir: &Path) -> Result<Vec<FileHash>, CliError> {
    let mut out = Vec::new();
    for entry in WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Runtime(format!("listing {}: {e}", dir.display())))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let rel: Vec<String> = rel
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect();
        let rel = rel.join("/");
        if rel == MANIFEST || rel.ends_with(TIMINGS) {
            continue;
        }
        out.push(FileHash {
            sha256: sha256_file(entry.path())?,
            path: rel,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Timings {
    pub command: String,
    pub total_secs: f64,
    pub steps: BTreeMap<String, f64>,
    pub epoch_secs: Vec<f64>,
}

impl Timings {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("timings serialize");
        fs::write(dir.join(TIMINGS), text + "\n").map_err(|e| CliError::io(&dir.join(TIMINGS), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digest() {
        assert_eq!(
            sha256_bytes(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn tree_skips_manifest_and_timings() {
        let d = tempfile::tempdir().unwrap();
        fs::create_dir(d.path().join("sub")).unwrap();
        fs::write(d.path().join("b.csv"), "x").unwrap();
        fs::write(d.path().join("sub/a.csv"), "y").unwrap();
        fs::write(d.path().join("sub/timings.json"), "1").unwrap();
        fs::write(d.path().join(MANIFEST), "{}").unwrap();
        fs::write(d.path().join("sub").join(MANIFEST), "{}").unwrap();
        let t = hash_tree(d.path()).unwrap();
        let paths: Vec<&str> = t.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["b.csv", "sub/a.csv", "sub/manifest.json"]);
    }
}

//! The run directory and its content-hash manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use phenoaudit::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Master seed every stage derives its randomness from.
    pub seed: u64,
    /// Relative path (forward slashes) to lowercase hex SHA-256.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct RunDir {
    root: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Start a fresh run, discarding any previous manifest.
    pub fn create(root: &Path, seed: u64) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest: Manifest {
                seed,
                files: BTreeMap::new(),
            },
        })
    }

    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        if !path.is_file() {
            return Err(Error::MissingInput(format!(
                "{} (run `phenoaudit generate --run {}` first)",
                path.display(),
                root.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn seed(&self) -> u64 {
        self.manifest.seed
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).is_file()
    }

    /// Resolve an input. A listed file must still match its hash; an
    /// unlisted one (for example a judgment log copied in by hand) is
    /// adopted into the manifest.
    pub fn input(&mut self, rel: &str) -> Result<PathBuf> {
        let path = self.path(rel);
        if !path.is_file() {
            return Err(Error::MissingInput(format!("{rel} in {}", self.root.display())));
        }
        let actual = sha256_file(&path)?;
        match self.manifest.files.get(rel) {
            Some(expected) if *expected != actual => Err(Error::Integrity {
                table: MANIFEST_FILE.into(),
                row: 0,
                reason: format!("{rel} changed since it was recorded"),
            }),
            Some(_) => Ok(path),
            None => {
                tracing::info!(file = rel, "adopting unlisted input into the manifest");
                self.manifest.files.insert(rel.to_string(), actual);
                Ok(path)
            }
        }
    }

    /// Run `write` against the output path, then record the file's hash.
    pub fn produce(&mut self, rel: &str, write: impl FnOnce(&Path) -> Result<()>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write(&path)?;
        self.record(rel)?;
        Ok(path)
    }

    pub fn record(&mut self, rel: &str) -> Result<()> {
        let digest = sha256_file(&self.path(rel))?;
        self.manifest.files.insert(rel.to_string(), digest);
        Ok(())
    }

    /// Every listed file exists and matches its hash.
    pub fn verify_all(&self) -> Result<()> {
        let mut bad = Vec::new();
        for (rel, expected) in &self.manifest.files {
            let path = self.path(rel);
            if !path.is_file() {
                bad.push(format!("{rel} (missing)"));
            } else if sha256_file(&path)? != *expected {
                bad.push(format!("{rel} (hash mismatch)"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Integrity {
                table: MANIFEST_FILE.into(),
                row: 0,
                reason: bad.join(", "),
            })
        }
    }

    pub fn save(&self) -> Result<()> {
        let path = self.path(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        text.push('\n');
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

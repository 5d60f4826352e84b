//! Directory-backed fingerprint store.
//!
//! Each entry is a `<model_id>.tpfp.json` file in the registry root.
//! `index.json` summarizes them but is always rebuilt from the files, whose
//! hashes are authoritative. Mutations hold an exclusive `.lock` file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::arch_map::ProjectionKind;
use crate::canonical;
use crate::error::{Error, Result};
use crate::fingerprint::{deserialize_fingerprint, serialize_fingerprint, Fingerprint};
use crate::manifest::write_atomic;

pub const REGISTRY_ENV: &str = "TPFP_REGISTRY";
pub const INDEX_FILE: &str = "index.json";
const LOCK_FILE: &str = ".lock";
const SUFFIX: &str = ".tpfp.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_id: String,
    pub file: String,
    pub num_layers: usize,
    pub kinds: Vec<ProjectionKind>,
    pub content_hash: String,
}

impl RegistryEntry {
    fn of(fp: &Fingerprint, file: String) -> Self {
        RegistryEntry {
            model_id: fp.model_id.clone(),
            file,
            num_layers: fp.num_layers,
            kinds: fp.kind_list(),
            content_hash: fp.content_hash.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Index {
    entries: Vec<RegistryEntry>,
}

#[derive(Debug, Clone)]
pub struct Registry {
    root: PathBuf,
}

/// Removes the lock file when dropped.
#[derive(Debug)]
pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Registry {
    /// `$TPFP_REGISTRY`, else `~/.tpfp/registry`, else `.tpfp-registry`.
    pub fn default_root() -> PathBuf {
        if let Some(p) = std::env::var_os(REGISTRY_ENV).filter(|p| !p.is_empty()) {
            return PathBuf::from(p);
        }
        match std::env::var_os("HOME").filter(|p| !p.is_empty()) {
            Some(home) => Path::new(&home).join(".tpfp").join("registry"),
            None => PathBuf::from(".tpfp-registry"),
        }
    }

    /// Opens (creating if needed) the registry at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Registry> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Registry { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::RegistryLocked {
                root: self.root.clone(),
                lock: path,
            }),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn entry_files(&self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let name = entry.file_name();
            if name.to_string_lossy().ends_with(SUFFIX) && entry.path().is_file() {
                files.push(entry.path());
            }
        }
        files.sort();
        Ok(files)
    }

    /// Loads and verifies every stored fingerprint with its path, ordered
    /// by model id.
    pub fn load_entries(&self) -> Result<Vec<(PathBuf, Fingerprint)>> {
        let mut fps = Vec::new();
        for path in self.entry_files()? {
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let fp = deserialize_fingerprint(&bytes, &path.display().to_string())?;
            fps.push((path, fp));
        }
        fps.sort_by(|a, b| a.1.model_id.cmp(&b.1.model_id));
        for w in fps.windows(2) {
            if w[0].1.model_id == w[1].1.model_id {
                return Err(Error::DuplicateModelId(w[0].1.model_id.clone()));
            }
        }
        Ok(fps)
    }

    pub fn load_all(&self) -> Result<Vec<Fingerprint>> {
        Ok(self.load_entries()?.into_iter().map(|(_, fp)| fp).collect())
    }

    fn reindex(&self) -> Result<Vec<RegistryEntry>> {
        let entries: Vec<RegistryEntry> = self
            .load_entries()?
            .iter()
            .map(|(path, fp)| {
                RegistryEntry::of(
                    fp,
                    path.file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                )
            })
            .collect();
        self.write_index(&entries)?;
        Ok(entries)
    }

    /// Verifies every file and rewrites the index from the directory scan.
    pub fn verify(&self) -> Result<Vec<RegistryEntry>> {
        let _lock = self.lock()?;
        self.reindex()
    }

    /// Same as [`Registry::verify`]; listing never trusts a stale index.
    pub fn list(&self) -> Result<Vec<RegistryEntry>> {
        self.verify()
    }

    /// Stores a copy of `fp`. Fails if its model id is already present.
    pub fn add(&self, fp: &Fingerprint) -> Result<PathBuf> {
        let _lock = self.lock()?;
        let target = self.root.join(fp.file_name());
        for path in self.entry_files()? {
            let existing_id = stored_model_id(&path)?;
            if existing_id == fp.model_id || path == target {
                return Err(Error::DuplicateModelId(fp.model_id.clone()));
            }
        }
        write_atomic(&target, &serialize_fingerprint(fp))?;
        self.reindex()?;
        Ok(target)
    }

    fn write_index(&self, entries: &[RegistryEntry]) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        let text = canonical::to_string(
            &Index {
                entries: entries.to_vec(),
            },
            true,
        );
        if fs::read_to_string(&path).ok().as_deref() == Some(text.as_str()) {
            return Ok(());
        }
        if path.exists() {
            log::info!("rewriting registry index {}", path.display());
        }
        write_atomic(&path, text.as_bytes())
    }

    /// Entries recorded in `index.json`, without verification.
    pub fn read_index(&self) -> Result<BTreeMap<String, RegistryEntry>> {
        let path = self.root.join(INDEX_FILE);
        if !path.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text).map_err(|e| Error::FingerprintMalformed {
            context: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Ok(index
            .entries
            .into_iter()
            .map(|e| (e.model_id.clone(), e))
            .collect())
    }
}

fn stored_model_id(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let doc: Value = serde_json::from_slice(&bytes).map_err(|e| Error::FingerprintMalformed {
        context: path.display().to_string(),
        reason: e.to_string(),
    })?;
    doc.get("model_id")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::FingerprintMalformed {
            context: path.display().to_string(),
            reason: "missing model_id".into(),
        })
}

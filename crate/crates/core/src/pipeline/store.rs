//! On-disk artifact store: one directory per artifact holding payload files
//! and a `record.json`, plus a store-wide writer lock.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::artifact::ArtifactName;

pub const STORE_ENV: &str = "ADS_STORE";
pub const DEFAULT_STORE: &str = "ads-store";
const RECORD_FILE: &str = "record.json";
const LOCK_FILE: &str = ".lock";
const STAGING_DIR: &str = ".staging";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub config_hash: String,
    /// Dependency name → that dependency's payload hash at build time.
    pub input_hashes: BTreeMap<String, String>,
    /// Payload file name → SHA-256 of its bytes.
    pub payloads: BTreeMap<String, String>,
    pub payload_hash: String,
    pub created_at: u64,
}

impl ArtifactRecord {
    /// Hash over the stage's inputs; identifies what the payload was built from.
    pub fn manifest_hash(config_hash: &str, input_hashes: &BTreeMap<String, String>) -> String {
        let mut h = Sha256::new();
        h.update(config_hash.as_bytes());
        for (k, v) in input_hashes {
            h.update(b"\n");
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
        }
        hex::encode(h.finalize())
    }
}

fn payload_hash(payloads: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in payloads {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Clone, Debug)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        Ok(Self { root })
    }

    /// `$ADS_STORE` if set, else `fallback`.
    pub fn from_env(fallback: Option<&Path>) -> Result<Self> {
        match std::env::var_os(STORE_ENV) {
            Some(v) if !v.is_empty() => Self::open(PathBuf::from(v)),
            _ => Self::open(fallback.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_STORE))),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn dir(&self, name: &ArtifactName) -> PathBuf {
        self.root.join(name.to_string())
    }

    pub fn record(&self, name: &ArtifactName) -> Result<Option<ArtifactRecord>> {
        let path = self.dir(name).join(RECORD_FILE);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Some(serde_json::from_str(&text)?))
    }

    /// The record, or a dependency error naming the missing artifact.
    pub fn require(&self, name: &ArtifactName) -> Result<ArtifactRecord> {
        self.record(name)?
            .ok_or_else(|| Error::Dependency(format!("artifact `{name}` is not in the store")))
    }

    pub fn payload_path(&self, name: &ArtifactName, file: &str) -> PathBuf {
        self.dir(name).join(file)
    }

    /// Checks that every payload file still has its recorded hash.
    pub fn verify(&self, name: &ArtifactName) -> Result<bool> {
        let Some(rec) = self.record(name)? else {
            return Ok(false);
        };
        for (file, digest) in &rec.payloads {
            let p = self.payload_path(name, file);
            if !p.exists() || file_digest(&p)? != *digest {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn remove(&self, name: &ArtifactName) -> Result<()> {
        let dir = self.dir(name);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        Ok(())
    }

    /// Names of all artifacts with a record.
    pub fn list(&self) -> Result<Vec<ArtifactName>> {
        let mut out = Vec::new();
        for entry in fs::read_dir(&self.root).map_err(|e| Error::io(&self.root, e))? {
            let entry = entry.map_err(|e| Error::io(&self.root, e))?;
            let Some(s) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if let Ok(name) = s.parse::<ArtifactName>() {
                if entry.path().join(RECORD_FILE).exists() {
                    out.push(name);
                }
            }
        }
        out.sort_by_key(|n| n.to_string());
        Ok(out)
    }

    pub fn lock(&self) -> Result<StoreLock> {
        let path = self.root.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(StoreLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Dependency(format!(
                "store is locked by another writer ({}); remove it if no build is running",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    /// Builds an artifact in a staging directory and moves it into place only
    /// after `build` succeeds and the record is written. On failure nothing of
    /// the partial output remains.
    pub fn commit<F>(
        &self,
        _lock: &StoreLock,
        name: &ArtifactName,
        config_hash: &str,
        input_hashes: BTreeMap<String, String>,
        build: F,
    ) -> Result<ArtifactRecord>
    where
        F: FnOnce(&Path) -> Result<()>,
    {
        let staging_root = self.root.join(STAGING_DIR);
        let staging = staging_root.join(name.to_string());
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        }
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let result = (|| {
            build(&staging)?;
            let mut payloads = BTreeMap::new();
            let mut files: Vec<_> = fs::read_dir(&staging)
                .map_err(|e| Error::io(&staging, e))?
                .collect::<std::io::Result<_>>()
                .map_err(|e| Error::io(&staging, e))?;
            files.sort_by_key(|e| e.file_name());
            for f in files {
                let fname = f.file_name().to_string_lossy().into_owned();
                if fname == RECORD_FILE {
                    return Err(Error::Internal("stage wrote a reserved file name".into()));
                }
                payloads.insert(fname, file_digest(&f.path())?);
            }
            let record = ArtifactRecord {
                name: name.to_string(),
                config_hash: config_hash.to_string(),
                input_hashes,
                payload_hash: payload_hash(&payloads),
                payloads,
                created_at: crate::gradstore::now_unix(),
            };
            let rec_path = staging.join(RECORD_FILE);
            fs::write(&rec_path, serde_json::to_string_pretty(&record)?).map_err(|e| Error::io(&rec_path, e))?;
            let target = self.dir(name);
            if target.exists() {
                fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
            }
            fs::rename(&staging, &target).map_err(|e| Error::io(&target, e))?;
            Ok(record)
        })();
        if result.is_err() && staging.exists() {
            let _ = fs::remove_dir_all(&staging);
        }
        result
    }
}

/// Held while writing; the lock file is removed on drop.
#[derive(Debug)]
pub struct StoreLock {
    path: PathBuf,
}

impl Drop for StoreLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_is_all_or_nothing() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path()).unwrap();
        let lock = store.lock().unwrap();
        assert!(store.lock().is_err());
        let name = ArtifactName::Teacher;
        let err = store.commit(&lock, &name, "c", BTreeMap::new(), |dir| {
            fs::write(dir.join("half.bin"), b"partial").unwrap();
            Err(Error::invalid("boom"))
        });
        assert!(err.is_err());
        assert!(!store.dir(&name).exists());
        assert!(store.record(&name).unwrap().is_none());
        assert!(fs::read_dir(tmp.path().join(STAGING_DIR)).unwrap().next().is_none());

        let rec = store
            .commit(&lock, &name, "c", BTreeMap::new(), |dir| {
                fs::write(dir.join("a.bin"), b"abc").map_err(|e| Error::io(dir, e))
            })
            .unwrap();
        assert_eq!(store.record(&name).unwrap().unwrap(), rec);
        assert!(store.verify(&name).unwrap());
        assert_eq!(store.list().unwrap(), vec![name]);
        fs::write(store.payload_path(&name, "a.bin"), b"tampered").unwrap();
        assert!(!store.verify(&name).unwrap());
        drop(lock);
        assert!(store.lock().is_ok());
    }

    #[test]
    fn missing_artifact_is_a_dependency_error() {
        let tmp = tempfile::tempdir().unwrap();
        let store = Store::open(tmp.path()).unwrap();
        let err = store.require(&ArtifactName::StudentGrad).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("student_grad"));
    }
}

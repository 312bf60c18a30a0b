//! Checksummed on-disk result store.
//!
//! Every artifact of a run lives under one root directory and is listed in a
//! `manifest.json` holding its SHA-256 digest and size. The manifest is
//! written last, contains no timestamps or environment details, and keeps
//! its entries sorted by path — so a run is reproducible byte-for-byte from
//! (config, seed) alone and two manifests can be compared with `diff`.

use crate::dsp::Channel;
use crate::probe::ProbeKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid artifact path {0:?}: must be relative, non-empty, without '..' components")]
    InvalidPath(String),
    #[error("artifact {0:?} was already written")]
    Duplicate(String),
    #[error("manifest is unreadable: {0}")]
    Manifest(String),
    #[error("checksum mismatch for {path}: manifest {expected}, file {actual}")]
    ChecksumMismatch { path: String, expected: String, actual: String },
    #[error("artifact {0} listed in the manifest is missing")]
    MissingArtifact(String),
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sha256: String,
    pub bytes: u64,
}

/// The manifest document: artifact paths (relative to the store root) mapped
/// to their digests. A `BTreeMap` keeps serialization order stable.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

/// Writer for one result directory.
#[derive(Debug)]
pub struct ResultStore {
    root: PathBuf,
    manifest: Manifest,
    written: std::collections::BTreeSet<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        let _ = write!(out, "{b:02x}");
    }
    out
}

fn check_relpath(relpath: &str) -> Result<(), StoreError> {
    let bad = relpath.is_empty()
        || Path::new(relpath).is_absolute()
        || relpath
            .split(['/', '\\'])
            .any(|c| c.is_empty() || c == "." || c == "..")
        || relpath == MANIFEST_NAME;
    if bad {
        return Err(StoreError::InvalidPath(relpath.into()));
    }
    Ok(())
}

impl ResultStore {
    /// Opens (creating if needed) a store rooted at `root` with an empty
    /// manifest.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| StoreError::Io {
            path: root.display().to_string(),
            source: e,
        })?;
        Ok(ResultStore { root, manifest: Manifest::default(), written: Default::default() })
    }

    /// Opens an existing store and loads its manifest, so further writes
    /// extend it.
    pub fn load(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let manifest = read_manifest(&root)?;
        Ok(ResultStore { root, manifest, written: Default::default() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    /// Writes one artifact and records its digest. Each path may be written
    /// only once per store lifetime; re-opening with [`ResultStore::load`]
    /// allows replacing an artifact (the digest is updated).
    pub fn write_bytes(&mut self, relpath: &str, bytes: &[u8]) -> Result<(), StoreError> {
        check_relpath(relpath)?;
        if self.written.contains(relpath) {
            return Err(StoreError::Duplicate(relpath.into()));
        }
        let on_disk = self.root.join(relpath);
        if let Some(parent) = on_disk.parent() {
            fs::create_dir_all(parent).map_err(|e| StoreError::Io {
                path: parent.display().to_string(),
                source: e,
            })?;
        }
        fs::write(&on_disk, bytes).map_err(|e| StoreError::Io {
            path: on_disk.display().to_string(),
            source: e,
        })?;
        self.manifest.artifacts.insert(
            relpath.into(),
            ManifestEntry { sha256: sha256_hex(bytes), bytes: bytes.len() as u64 },
        );
        self.written.insert(relpath.into());
        Ok(())
    }

    pub fn write_string(&mut self, relpath: &str, text: &str) -> Result<(), StoreError> {
        self.write_bytes(relpath, text.as_bytes())
    }

    /// Writes the manifest (always last) and returns its path.
    pub fn finalize(&self) -> Result<PathBuf, StoreError> {
        let path = self.root.join(MANIFEST_NAME);
        let mut text = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| StoreError::Manifest(e.to_string()))?;
        text.push('\n');
        fs::write(&path, text).map_err(|e| StoreError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Ok(path)
    }
}

/// Reads the manifest of an existing store.
pub fn read_manifest(root: impl AsRef<Path>) -> Result<Manifest, StoreError> {
    let path = root.as_ref().join(MANIFEST_NAME);
    let mut text = String::new();
    fs::File::open(&path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| StoreError::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_str(&text).map_err(|e| StoreError::Manifest(e.to_string()))
}

/// Re-hashes every artifact listed in a store's manifest and reports the
/// first discrepancy.
pub fn verify_store(root: impl AsRef<Path>) -> Result<Manifest, StoreError> {
    let root = root.as_ref();
    let manifest = read_manifest(root)?;
    for (relpath, entry) in &manifest.artifacts {
        let path = root.join(relpath);
        let bytes = fs::read(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                StoreError::MissingArtifact(relpath.clone())
            } else {
                StoreError::Io { path: path.display().to_string(), source: e }
            }
        })?;
        let actual = sha256_hex(&bytes);
        if actual != entry.sha256 {
            return Err(StoreError::ChecksumMismatch {
                path: relpath.clone(),
                expected: entry.sha256.clone(),
                actual,
            });
        }
    }
    Ok(manifest)
}

/// Formats a power value for a path segment: `1.5` becomes `"1p500"`.
pub fn fmt_power(p: f64) -> String {
    format!("{p:.3}").replace('.', "p")
}

/// Store-relative directory for one acquisition cell.
pub fn cell_dir(channel: Channel, kind: ProbeKind, p_pr: f64, p_pu: Option<f64>) -> String {
    let pump = match p_pu {
        Some(p) => format!("pump_{}", fmt_power(p)),
        None => "unpumped".into(),
    };
    format!("spectra/{}/{}/ppr_{}/{}", channel.label(), kind.label(), fmt_power(p_pr), pump)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_lists_artifacts_sorted_with_correct_digests() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultStore::create(dir.path()).unwrap();
        store.write_string("b/two.csv", "2,3\n").unwrap();
        store.write_string("a/one.csv", "1\n").unwrap();
        store.finalize().unwrap();

        let manifest = read_manifest(dir.path()).unwrap();
        let keys: Vec<&String> = manifest.artifacts.keys().collect();
        assert_eq!(keys, ["a/one.csv", "b/two.csv"]);
        let entry = &manifest.artifacts["a/one.csv"];
        assert_eq!(entry.bytes, 2);
        assert_eq!(entry.sha256, sha256_hex(b"1\n"));
        assert_eq!(entry.sha256.len(), 64);
    }

    #[test]
    fn manifest_bytes_are_order_independent() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut s1 = ResultStore::create(d1.path()).unwrap();
        s1.write_string("x.csv", "x").unwrap();
        s1.write_string("y.csv", "y").unwrap();
        s1.finalize().unwrap();
        let mut s2 = ResultStore::create(d2.path()).unwrap();
        s2.write_string("y.csv", "y").unwrap();
        s2.write_string("x.csv", "x").unwrap();
        s2.finalize().unwrap();
        let m1 = fs::read(d1.path().join(MANIFEST_NAME)).unwrap();
        let m2 = fs::read(d2.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(m1, m2);
    }

    #[test]
    fn verify_detects_corruption_and_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultStore::create(dir.path()).unwrap();
        store.write_string("data.csv", "payload").unwrap();
        store.write_string("gone.csv", "bye").unwrap();
        store.finalize().unwrap();
        assert!(verify_store(dir.path()).is_ok());

        fs::write(dir.path().join("data.csv"), "tampered").unwrap();
        match verify_store(dir.path()) {
            Err(StoreError::ChecksumMismatch { path, .. }) => assert_eq!(path, "data.csv"),
            other => panic!("expected checksum mismatch, got {other:?}"),
        }

        fs::write(dir.path().join("data.csv"), "payload").unwrap();
        fs::remove_file(dir.path().join("gone.csv")).unwrap();
        match verify_store(dir.path()) {
            Err(StoreError::MissingArtifact(p)) => assert_eq!(p, "gone.csv"),
            other => panic!("expected missing artifact, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_invalid_paths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultStore::create(dir.path()).unwrap();
        store.write_string("a.csv", "1").unwrap();
        assert!(matches!(store.write_string("a.csv", "2"), Err(StoreError::Duplicate(_))));
        for bad in ["", "/abs.csv", "a/../b.csv", "./x", "manifest.json"] {
            assert!(
                matches!(store.write_string(bad, "x"), Err(StoreError::InvalidPath(_))),
                "path {bad:?} should be rejected"
            );
        }
    }

    #[test]
    fn load_extends_an_existing_store() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ResultStore::create(dir.path()).unwrap();
        store.write_string("first.csv", "1").unwrap();
        store.finalize().unwrap();

        let mut reopened = ResultStore::load(dir.path()).unwrap();
        reopened.write_string("second.csv", "2").unwrap();
        // Replacing a known artifact is allowed after load.
        reopened.write_string("first.csv", "1b").unwrap();
        reopened.finalize().unwrap();

        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest.artifacts.len(), 2);
        assert_eq!(manifest.artifacts["first.csv"].sha256, sha256_hex(b"1b"));
        assert!(verify_store(dir.path()).is_ok());
    }

    #[test]
    fn cell_paths_are_stable() {
        assert_eq!(fmt_power(1.5), "1p500");
        assert_eq!(fmt_power(10.0), "10p000");
        assert_eq!(
            cell_dir(Channel::Dc, ProbeKind::Coherent, 1.5, Some(10.0)),
            "spectra/dc/coherent/ppr_1p500/pump_10p000"
        );
        assert_eq!(
            cell_dir(Channel::Rf, ProbeKind::Antisqueezed, 0.5, None),
            "spectra/rf/antisqueezed/ppr_0p500/unpumped"
        );
    }
}

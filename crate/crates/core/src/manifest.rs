// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run manifests, content hashing and seed derivation.
//!
//! Every purpose-specific random stream is seeded with
//! [`derive_seed`]`(master, label)`: the first 8 bytes (little-endian) of
//! `SHA-256(master as u64 LE || label)`. Labels are stable strings such as
//! `split/country_currency` or `icl/es/country_currency/Brazil`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    u64::from_le_bytes(b)
}

/// Current UTC time as RFC 3339.
pub fn now_rfc3339() -> String {
    time::OffsetDateTime::now_utc()
        .format(&time::format_description::well_known::Rfc3339)
        .unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Identity of one run. The manifest id hashes every field except the
/// timestamps, so identical reruns produce identical artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub model_fingerprint: String,
    pub dataset_hash: String,
    pub split: Option<serde_json::Value>,
    pub seed: u64,
    pub intervention_fingerprints: Vec<String>,
    pub tool_version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn id(&self) -> String {
        let core = serde_json::json!({
            "command": self.command,
            "config_hash": self.config_hash,
            "model_fingerprint": self.model_fingerprint,
            "dataset_hash": self.dataset_hash,
            "split": self.split,
            "seed": self.seed,
            "intervention_fingerprints": self.intervention_fingerprints,
            "tool_version": self.tool_version,
        });
        sha256_hex(core.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

/// On-disk manifest: the run identity plus content hashes of its artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub manifest_id: String,
    pub manifest: RunManifest,
    pub artifacts: Vec<ArtifactEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Header line carried by CSV artifacts.
pub fn csv_header_line(manifest_id: &str) -> String {
    format!("# manifest={manifest_id}\n")
}

/// Artifacts of one run, buffered in memory and written all-or-nothing.
#[derive(Debug, Default)]
pub struct ArtifactSet {
    files: BTreeMap<String, Vec<u8>>,
}

impl ArtifactSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, rel_path: impl Into<String>, bytes: Vec<u8>) {
        self.files.insert(rel_path.into(), bytes);
    }

    /// CSV content with the manifest header prepended.
    pub fn add_csv(&mut self, rel_path: impl Into<String>, manifest_id: &str, body: &[u8]) {
        let mut bytes = csv_header_line(manifest_id).into_bytes();
        bytes.extend_from_slice(body);
        self.add(rel_path, bytes);
    }

    /// JSON object with a `manifest_id` field inserted.
    pub fn add_json(
        &mut self,
        rel_path: impl Into<String>,
        manifest_id: &str,
        value: &impl Serialize,
    ) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        let v = match v {
            serde_json::Value::Object(ref mut m) => {
                m.insert("manifest_id".into(), manifest_id.into());
                v
            }
            other => serde_json::json!({ "manifest_id": manifest_id, "data": other }),
        };
        let mut bytes = serde_json::to_vec_pretty(&v)?;
        bytes.push(b'\n');
        self.add(rel_path, bytes);
        Ok(())
    }

    pub fn paths(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn get(&self, path: &str) -> Option<&[u8]> {
        self.files.get(path).map(Vec::as_slice)
    }

    /// Write every artifact plus `manifest.json` under `dir`.
    ///
    /// Files are first written to a staging directory next to `dir` and only
    /// moved into place once all of them were written, so a failed write
    /// leaves no partial artifact set behind.
    pub fn write(&self, dir: &Path, manifest: &RunManifest) -> Result<ManifestFile> {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "out".into());
        let staging = dir.with_file_name(format!(".{name}.staging-{}", std::process::id()));
        let result = self.write_staged(&staging, dir, manifest);
        let _ = std::fs::remove_dir_all(&staging);
        result
    }

    fn write_staged(&self, staging: &Path, dir: &Path, manifest: &RunManifest) -> Result<ManifestFile> {
        let mut artifacts = Vec::new();
        let put = |rel: &str, bytes: &[u8]| -> Result<()> {
            let path = staging.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
        };
        for (rel, bytes) in &self.files {
            put(rel, bytes)?;
            artifacts.push(ArtifactEntry {
                path: rel.clone(),
                sha256: sha256_hex(bytes),
            });
        }
        let file = ManifestFile {
            manifest_id: manifest.id(),
            manifest: manifest.clone(),
            artifacts,
        };
        put(MANIFEST_FILE, &serde_json::to_vec_pretty(&file)?)?;

        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for rel in self.files.keys().map(String::as_str).chain([MANIFEST_FILE]) {
            let to = dir.join(rel);
            if let Some(parent) = to.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            std::fs::rename(staging.join(rel), &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(file)
    }
}

/// Problems found by [`verify_dir`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub manifest_id: String,
    pub checked: usize,
    pub problems: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Re-derive the manifest id and artifact hashes under `dir` and confirm
/// every artifact embeds the manifest id.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let file: ManifestFile = serde_json::from_slice(&bytes)?;
    let mut problems = Vec::new();
    let id = file.manifest.id();
    if id != file.manifest_id {
        problems.push(format!(
            "manifest id mismatch: recorded {}, derived {id}",
            file.manifest_id
        ));
    }
    for a in &file.artifacts {
        let p = dir.join(&a.path);
        match std::fs::read(&p) {
            Err(e) => problems.push(format!("{}: unreadable ({e})", a.path)),
            Ok(content) => {
                if sha256_hex(&content) != a.sha256 {
                    problems.push(format!("{}: content hash mismatch", a.path));
                }
                if !embeds_id(&a.path, &content, &file.manifest_id) {
                    problems.push(format!("{}: does not embed the manifest id", a.path));
                }
            }
        }
    }
    Ok(VerifyReport {
        manifest_id: file.manifest_id,
        checked: file.artifacts.len(),
        problems,
    })
}

fn embeds_id(path: &str, content: &[u8], id: &str) -> bool {
    if path.ends_with(".csv") {
        content.starts_with(csv_header_line(id).as_bytes())
    } else if path.ends_with(".json") {
        serde_json::from_slice::<serde_json::Value>(content)
            .ok()
            .and_then(|v| v.get("manifest_id").and_then(|m| m.as_str()).map(|m| m == id))
            .unwrap_or(false)
    } else if path.ends_with(".rltc") {
        crate::container::Container::from_bytes(content)
            .ok()
            .and_then(|c| c.meta.get("manifest_id").and_then(|m| m.as_str()).map(|m| m == id))
            .unwrap_or(false)
    } else {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> RunManifest {
        RunManifest {
            command: "analyze".into(),
            config_hash: "c".into(),
            model_fingerprint: "m".into(),
            dataset_hash: "d".into(),
            split: None,
            seed: 0,
            intervention_fingerprints: vec![],
            tool_version: "0.1.0".into(),
            started_at: "t0".into(),
            finished_at: "t1".into(),
        }
    }

    #[test]
    fn derive_seed_is_label_sensitive() {
        assert_eq!(derive_seed(1, "a"), derive_seed(1, "a"));
        assert_ne!(derive_seed(1, "a"), derive_seed(1, "b"));
        assert_ne!(derive_seed(1, "a"), derive_seed(2, "a"));
    }

    #[test]
    fn id_ignores_timestamps() {
        let a = manifest();
        let mut b = manifest();
        b.started_at = "later".into();
        assert_eq!(a.id(), b.id());
        b.seed = 3;
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn verify_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let m = manifest();
        let id = m.id();
        let mut set = ArtifactSet::new();
        set.add_csv("a.csv", &id, b"x,y\n1,2\n");
        set.add_json("b.json", &id, &serde_json::json!({"k": 1})).unwrap();
        set.write(dir.path(), &m).unwrap();
        assert!(verify_dir(dir.path()).unwrap().ok());
        std::fs::write(dir.path().join("a.csv"), b"x,y\n1,3\n").unwrap();
        let r = verify_dir(dir.path()).unwrap();
        assert_eq!(r.problems.len(), 2);
    }
}

//! Output directory bookkeeping: every file written through [`Output`] is listed in the manifest
//! with its SHA-256.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST: &str = "manifest.toml";
pub const FAILED: &str = "FAILED";

#[derive(Clone, Debug, Serialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    status: &'a str,
    stages_completed: Vec<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<&'a str>,
    artifact: Vec<ArtifactEntry>,
    /// The resolved configuration, including every threshold.
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<RunConfig>,
}

pub struct Output {
    root: PathBuf,
    entries: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let d = Sha256::digest(bytes);
    d.iter().map(|b| format!("{b:02x}")).collect()
}

impl Output {
    /// Creates the directory. A stale failure marker or manifest from an earlier run is removed.
    pub fn create(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        for stale in [FAILED, MANIFEST] {
            let p = root.join(stale);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        Ok(Self { root: root.to_path_buf(), entries: BTreeMap::new() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> io::Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(&p, bytes)?;
        self.entries.insert(rel.to_string(), ArtifactEntry { path: rel.to_string(), sha256: sha256_hex(bytes), bytes: bytes.len() as u64 });
        Ok(p)
    }

    pub fn write_str(&mut self, rel: &str, text: &str) -> io::Result<PathBuf> {
        self.write(rel, text.as_bytes())
    }

    pub fn entries(&self) -> impl Iterator<Item = &ArtifactEntry> {
        self.entries.values()
    }

    /// Failure marker naming the stage; the artifacts written so far stay in place.
    pub fn mark_failed(&mut self, stage: &str, error: &str) -> io::Result<()> {
        self.write_str(FAILED, &format!("stage = \"{stage}\"\nerror = {:?}\n", error))?;
        Ok(())
    }

    /// Writes the manifest and returns its text.
    pub fn finish(&self, status: &str, completed: &[&str], failed_stage: Option<&str>, config: Option<&RunConfig>) -> io::Result<String> {
        let manifest = Manifest {
            schema_version: crate::config::SCHEMA_VERSION,
            status,
            stages_completed: completed.to_vec(),
            failed_stage,
            artifact: self.entries.values().cloned().collect(),
            config: config.map(|c| {
                let mut c = c.clone();
                c.out = None;
                c
            }),
        };
        let text = toml::to_string(&manifest).map_err(|e| io::Error::new(io::ErrorKind::Other, e))?;
        fs::write(self.root.join(MANIFEST), &text)?;
        Ok(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_of_known_input() {
        assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}

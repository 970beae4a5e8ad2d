//! Campaign directory, artifact writing and stage caching by content hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

use super::config::CampaignConfig;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of an ordered list of parts, each length-prefixed.
pub fn hash_parts(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub stage_version: u32,
    pub input_hash: String,
    pub config_hash: String,
    /// Relative path to SHA-256 of every output.
    pub outputs: BTreeMap<String, String>,
}

pub struct Campaign {
    pub root: PathBuf,
    pub config: CampaignConfig,
    pub config_hash: String,
}

/// Outputs of one stage, written when the stage finishes.
#[derive(Default)]
pub struct StageOutputs {
    files: BTreeMap<String, Vec<u8>>,
}

impl StageOutputs {
    pub fn put(&mut self, rel: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        self.files.insert(rel.into(), bytes.into());
    }
}

impl Campaign {
    pub fn new(root: impl Into<PathBuf>, config: CampaignConfig) -> Self {
        let config_hash = config.hash();
        Self {
            root: root.into(),
            config,
            config_hash,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// `# config_hash=... seed=... schema_version=...` header for text artifacts.
    pub fn header(&self, schema_version: u32) -> String {
        format!(
            "config_hash={} seed={} schema_version={schema_version}",
            self.config_hash, self.config.seed
        )
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn read(&self, rel: &str) -> Result<Vec<u8>> {
        let path = self.path(rel);
        std::fs::read(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn read_string(&self, rel: &str) -> Result<String> {
        let path = self.path(rel);
        std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn remove(&self, rel: &str) -> Result<()> {
        let path = self.path(rel);
        match std::fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(Error::io(&path, e)),
        }
    }

    fn manifest_path(stage: &str) -> String {
        format!("manifests/{stage}.json")
    }

    pub fn manifest(&self, stage: &str) -> Result<Option<Manifest>> {
        let rel = Self::manifest_path(stage);
        if !self.exists(&rel) {
            return Ok(None);
        }
        let text = self.read_string(&rel)?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::Parse {
            path: self.path(&rel),
            message: e.to_string(),
        })
    }

    /// Output hashes of a finished stage, for chaining into downstream input hashes.
    pub fn stage_fingerprint(&self, stage: &str) -> Result<String> {
        let m = self
            .manifest(stage)?
            .ok_or_else(|| Error::config(format!("stage '{stage}' has not been run in {}", self.root.display())))?;
        Ok(serde_json::to_string(&m.outputs).expect("map serializes"))
    }

    /// True if the stage recorded this input hash and all its outputs are unchanged on disk.
    pub fn is_cached(&self, stage: &str, stage_version: u32, input_hash: &str) -> Result<bool> {
        let Some(m) = self.manifest(stage)? else {
            return Ok(false);
        };
        if m.stage_version != stage_version || m.input_hash != input_hash {
            return Ok(false);
        }
        for (rel, hash) in &m.outputs {
            let path = self.path(rel);
            match std::fs::read(&path) {
                Ok(bytes) if sha256_hex(&bytes) == *hash => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Runs `produce` unless the stage is cached; returns whether it ran.
    pub fn run_stage<F>(&self, stage: &str, stage_version: u32, input_hash: &str, produce: F) -> Result<bool>
    where
        F: FnOnce(&mut StageOutputs) -> Result<()>,
    {
        if self.is_cached(stage, stage_version, input_hash)? {
            log::info!("{stage}: cached");
            return Ok(false);
        }
        log::info!("{stage}: running");
        let mut out = StageOutputs::default();
        produce(&mut out)?;
        let mut outputs = BTreeMap::new();
        for (rel, bytes) in &out.files {
            self.write(rel, bytes)?;
            outputs.insert(rel.clone(), sha256_hex(bytes));
        }
        let m = Manifest {
            stage: stage.to_string(),
            stage_version,
            input_hash: input_hash.to_string(),
            config_hash: self.config_hash.clone(),
            outputs,
        };
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        self.write(&Self::manifest_path(stage), text.as_bytes())?;
        Ok(true)
    }
}

/// Little-endian `f64` blob.
pub fn f64_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f64_from_bytes(bytes: &[u8], path: &Path) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("length {} is not a multiple of 8", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Simple comma-separated table: `#` lines skipped, first remaining line is the header.
pub struct CsvTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                message: "missing header".into(),
            })?
            .split(',')
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for (k, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(str::to_string).collect();
            if r.len() != header.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    message: format!("data row {}: expected {} fields, got {}", k + 1, header.len(), r.len()),
                });
            }
            rows.push(r);
        }
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn get<'a>(&'a self, row: &'a [String], name: &str) -> Result<&'a str> {
        let i = self
            .column(name)
            .ok_or_else(|| Error::Schema(format!("missing column '{name}'")))?;
        Ok(&row[i])
    }

    pub fn get_f64(&self, row: &[String], name: &str) -> Result<f64> {
        let s = self.get(row, name)?;
        s.parse()
            .map_err(|_| Error::Schema(format!("column '{name}': '{s}' is not a number")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_cache_hits_and_invalidates() {
        let dir = tempfile::tempdir().unwrap();
        let c = Campaign::new(dir.path(), CampaignConfig::default());
        let mut calls = 0;
        for _ in 0..2 {
            c.run_stage("s", 1, "h1", |o| {
                calls += 1;
                o.put("reports/x.csv", "a\n");
                Ok(())
            })
            .unwrap();
        }
        assert_eq!(calls, 1);
        // modified output forces a rerun
        c.write("reports/x.csv", b"b\n").unwrap();
        assert!(!c.is_cached("s", 1, "h1").unwrap());
        assert!(!c.is_cached("s", 2, "h1").unwrap());
        assert!(!c.is_cached("s", 1, "h2").unwrap());
    }

    #[test]
    fn blob_round_trip() {
        let v = vec![1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        assert_eq!(f64_from_bytes(&f64_bytes(&v), Path::new("x")).unwrap(), v);
    }
}

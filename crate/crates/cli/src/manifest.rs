use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: String,
    pub config_path: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seed_source: &'static str,
    pub threads: usize,
    pub started_unix_s: f64,
    pub finished_unix_s: f64,
    pub applied_defaults: Map<String, Value>,
    pub outputs: Vec<OutputEntry>,
}

pub fn now_unix() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

pub fn sha256_file(path: &Path) -> Result<(String, u64)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok((hex::encode(Sha256::digest(&bytes)), bytes.len() as u64))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory of one run. Files are recorded as they are written and
/// the manifest goes last.
pub struct OutputDir {
    pub dir: PathBuf,
    written: Vec<String>,
}

impl OutputDir {
    pub fn create(dir: PathBuf) -> Result<Self> {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        // A stale manifest would make an interrupted rerun look complete.
        let stale = dir.join(MANIFEST);
        if stale.exists() {
            fs::remove_file(&stale)?;
        }
        Ok(Self { dir, written: Vec::new() })
    }

    pub fn write<F>(&mut self, name: &str, body: F) -> Result<()>
    where
        F: FnOnce(&mut BufWriter<fs::File>) -> repread_core::Result<()>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        body(&mut w)?;
        w.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value)?;
        self.write(name, |w| {
            w.write_all(text.as_bytes())?;
            w.write_all(b"\n")?;
            Ok(())
        })
    }

    pub fn outputs(&self) -> Result<Vec<OutputEntry>> {
        self.written
            .iter()
            .map(|name| {
                let (sha256, bytes) = sha256_file(&self.dir.join(name))?;
                Ok(OutputEntry {
                    path: name.clone(),
                    sha256,
                    bytes,
                })
            })
            .collect()
    }

    /// Writes the manifest to a temporary file and renames it into place.
    pub fn finish(self, manifest: &RunManifest) -> Result<PathBuf> {
        let tmp = self.dir.join(format!("{MANIFEST}.tmp"));
        let dest = self.dir.join(MANIFEST);
        fs::write(&tmp, serde_json::to_string_pretty(manifest)? + "\n")?;
        fs::rename(&tmp, &dest)?;
        Ok(dest)
    }
}

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub bytes: u64,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        let data = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
        Ok(FileDigest {
            path: path.to_path_buf(),
            bytes: data.len() as u64,
            sha256: hex::encode(Sha256::digest(&data)),
        })
    }
}

/// Provenance record written beside every artifact-producing command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub struct ManifestBuilder {
    command: &'static str,
    config: serde_json::Value,
    seeds: Vec<u64>,
    inputs: Vec<FileDigest>,
    started: String,
}

impl ManifestBuilder {
    pub fn start(command: &'static str, config: &impl Serialize, seeds: Vec<u64>) -> Result<Self> {
        Ok(ManifestBuilder {
            command,
            config: serde_json::to_value(config).context("serialising run config")?,
            seeds,
            inputs: Vec::new(),
            started: now(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    pub fn finish(self, dir: &Path, outputs: &[PathBuf]) -> Result<PathBuf> {
        let outputs = outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<Vec<_>>>()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.config,
            seeds: self.seeds,
            threads: rayon::current_num_threads(),
            inputs: self.inputs,
            outputs,
            started: self.started,
            finished: now(),
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = dir.join(MANIFEST_NAME);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Writes through a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .with_context(|| format!("{} has no file name", path.display()))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)
            .with_context(|| format!("writing {}", tmp.display()))?;
        f.sync_all().with_context(|| format!("syncing {}", tmp.display()))?;
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

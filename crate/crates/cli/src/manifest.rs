//! Run manifests: what was run, on which inputs, producing which files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use ordstab::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// `SOURCE_DATE_EPOCH` when set, so reruns can be byte-identical.
fn timestamp() -> Result<String> {
    let secs = match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => v
            .trim()
            .parse::<i64>()
            .map_err(|_| Error::InvalidArgument(format!("SOURCE_DATE_EPOCH={v:?} is not an integer")))?,
        Err(_) => std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs() as i64),
    };
    let t = DateTime::<Utc>::from_timestamp(secs, 0)
        .ok_or_else(|| Error::InvalidArgument(format!("timestamp {secs} out of range")))?;
    Ok(t.to_rfc3339_opts(SecondsFormat::Secs, true))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub timestamp: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Input path as given, mapped to its SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name relative to the output directory, mapped to its SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Collects the inputs of one command and writes its manifest last.
pub struct Run {
    command: &'static str,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl Run {
    pub fn new(command: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            command,
            seed,
            config,
            inputs: BTreeMap::new(),
        }
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.to_string().as_bytes())
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.insert(path.display().to_string(), hash_file(path)?);
        Ok(())
    }

    /// Hashes `files` inside `dir` and writes the manifest beside them.
    pub fn finish(self, dir: &Path, files: &[String]) -> Result<()> {
        let outputs = files
            .iter()
            .map(|f| Ok((f.clone(), hash_file(&dir.join(f))?)))
            .collect::<Result<_>>()?;
        let manifest = RunManifest {
            tool: "ordstab",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            seed: self.seed,
            timestamp: timestamp()?,
            config_hash: self.config_hash(),
            config: self.config,
            inputs: self.inputs,
            outputs,
        };
        write_json(&dir.join(MANIFEST), &manifest)
    }
}

pub fn write_json<S: Serialize>(path: &Path, v: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).map_err(|e| io(path, e))
}

/// Output directory; files are registered as they are named.
pub struct OutDir {
    pub dir: PathBuf,
    pub files: Vec<String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn file(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    pub fn writer(&mut self, name: &str) -> Result<std::io::BufWriter<std::fs::File>> {
        let path = self.file(name);
        let f = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
        Ok(std::io::BufWriter::new(f))
    }

    pub fn json<S: Serialize>(&mut self, name: &str, v: &S) -> Result<()> {
        let path = self.file(name);
        write_json(&path, v)
    }

    pub fn finish(self, run: Run) -> Result<()> {
        run.finish(&self.dir, &self.files)
    }
}

use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use exforge::Result;

/// SHA-256 over `blob <len>\0<content>`, the object hash git uses in SHA-256 repositories.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex::encode(h.finalize())
}

#[derive(Debug, Serialize)]
pub struct HashedFile {
    pub path: String,
    pub blob_sha256: String,
}

impl HashedFile {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.display().to_string(), blob_sha256: blob_hash(&std::fs::read(path)?) })
    }
}

/// Everything needed to regenerate a command's artifacts.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<HashedFile>,
    pub outputs: Vec<HashedFile>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>, config: serde_json::Value) -> Self {
        Self {
            tool: "exforge",
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            argv: std::env::args().collect(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(HashedFile::of(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(HashedFile::of(path)?);
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<PathBuf> {
        self.write_to(&dir.join("manifest.json"))
    }

    /// Writes `<stem>.manifest.json` next to a single-file artifact.
    pub fn write_beside(&self, artifact: &Path) -> Result<PathBuf> {
        let stem = artifact.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
        self.write_to(&artifact.with_file_name(format!("{stem}.manifest.json")))
    }

    fn write_to(&self, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(path.to_path_buf())
    }
}

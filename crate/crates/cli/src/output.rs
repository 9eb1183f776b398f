//! Run directories: every command writes its artifacts under one `--out`
//! directory, together with the resolved config and a manifest of hashes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::{CliError, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Serialize)]
struct ManifestEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    inputs: &'a [(String, String)],
    files: Vec<ManifestEntry>,
}

pub struct RunDir {
    root: PathBuf,
    command: &'static str,
    inputs: Vec<(String, String)>,
    files: Vec<String>,
}

impl RunDir {
    pub fn create(root: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            command,
            inputs: Vec::new(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records an input file by its path as given and its content hash.
    pub fn input(&mut self, role: &str, path: &Path) -> Result<()> {
        let digest = sha256_file(path)?;
        self.inputs
            .push((role.to_string(), format!("{} sha256:{digest}", path.display())));
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(CliError::io(parent))?;
        }
        fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.track(name);
        Ok(path)
    }

    pub fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers a file some other writer has produced under the root.
    pub fn track(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    /// Writes the resolved config and the manifest.
    pub fn finish(mut self, config: &RunConfig) -> Result<PathBuf> {
        self.write(RESOLVED_CONFIG, config.to_toml())?;
        let mut files = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.root.join(name);
            let meta = fs::metadata(&path).map_err(CliError::io(&path))?;
            files.push(ManifestEntry {
                path: name.clone(),
                bytes: meta.len(),
                sha256: sha256_file(&path)?,
            });
        }
        let manifest = Manifest {
            command: self.command,
            inputs: &self.inputs,
            files,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let path = self.root.join(MANIFEST);
        fs::write(&path, text).map_err(CliError::io(&path))?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(CliError::io(path))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

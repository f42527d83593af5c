//! Per-stage provenance sidecar (`MANIFEST.json`).
//!
//! Paths are written relative to the output directory when they live under
//! it, so manifests from two output directories compare equal. No
//! timestamps are recorded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "MANIFEST.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub tool_version: String,
    pub config_sha256: String,
    #[serde(default)]
    pub prompt_sha256: BTreeMap<String, String>,
    #[serde(default)]
    pub parameters: BTreeMap<String, serde_json::Value>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Accumulates a manifest while a stage runs.
#[derive(Debug)]
pub struct ManifestBuilder {
    root: PathBuf,
    manifest: Manifest,
}

impl ManifestBuilder {
    pub fn new(stage: &str, root: &Path, config_sha256: &str) -> Self {
        Self {
            root: root.to_path_buf(),
            manifest: Manifest {
                stage: stage.to_owned(),
                tool_version: env!("CARGO_PKG_VERSION").to_owned(),
                config_sha256: config_sha256.to_owned(),
                prompt_sha256: BTreeMap::new(),
                parameters: BTreeMap::new(),
                inputs: Vec::new(),
                outputs: Vec::new(),
                notes: Vec::new(),
            },
        }
    }

    pub fn param(&mut self, key: &str, value: impl Serialize) -> &mut Self {
        let value = serde_json::to_value(value).expect("manifest parameter serialises");
        self.manifest.parameters.insert(key.to_owned(), value);
        self
    }

    pub fn prompts(&mut self, checksums: Vec<(String, String)>) -> &mut Self {
        self.manifest.prompt_sha256.extend(checksums);
        self
    }

    pub fn note(&mut self, note: impl Into<String>) -> &mut Self {
        self.manifest.notes.push(note.into());
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let d = self.digest(path)?;
        self.manifest.inputs.push(d);
        Ok(self)
    }

    pub fn output(&mut self, path: &Path) -> Result<&mut Self, CliError> {
        let d = self.digest(path)?;
        self.manifest.outputs.push(d);
        Ok(self)
    }

    fn digest(&self, path: &Path) -> Result<FileDigest, CliError> {
        let sha256 = refqual::checksum::sha256_file(path).map_err(|e| CliError::io(path, e))?;
        Ok(FileDigest {
            path: display_path(&self.root, path),
            sha256,
        })
    }

    pub fn finish(&self) -> &Manifest {
        &self.manifest
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&self.manifest).expect("manifest serialises");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

/// `path` relative to `root` when below it; otherwise as given, with `/`
/// separators.
pub fn display_path(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub fn read_manifest(path: &Path) -> Result<Manifest, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

//! Run manifests written next to every artifact-producing command.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::digest::sha256_hex;
use crate::error::{Error, Result};

pub const RUN_MANIFEST_SCHEMA: &str = "bailaudit.run-manifest/v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    /// Derived from the command line and the hashes of every input and
    /// config, so identical reruns share an id.
    pub manifest_id: String,
    pub command: String,
    pub command_line: Vec<String>,
    pub config_hashes: BTreeMap<String, String>,
    pub input_hashes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    pub seeds: BTreeMap<String, u64>,
    pub started_at: String,
    pub finished_at: String,
    pub counts: BTreeMap<String, u64>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, command_line: Vec<String>, started_at: String) -> Self {
        RunManifest {
            schema: RUN_MANIFEST_SCHEMA.to_string(),
            manifest_id: String::new(),
            command: command.to_string(),
            command_line,
            config_hashes: BTreeMap::new(),
            input_hashes: BTreeMap::new(),
            backend: None,
            seeds: BTreeMap::new(),
            started_at,
            finished_at: String::new(),
            counts: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn hash_input(&mut self, label: &str, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.input_hashes.insert(label.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn compute_id(&self) -> String {
        let mut material = self.command_line.join("\u{1f}");
        for (k, v) in self.config_hashes.iter().chain(&self.input_hashes) {
            material.push('\u{1e}');
            material.push_str(k);
            material.push('=');
            material.push_str(v);
        }
        if let Some(b) = &self.backend {
            material.push('\u{1e}');
            material.push_str(b);
        }
        sha256_hex(material)[..16].to_string()
    }

    /// `<artifact>.manifest.json`
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn write(&mut self, artifact: &Path, finished_at: String) -> Result<PathBuf> {
        self.finished_at = finished_at;
        self.manifest_id = self.compute_id();
        let path = Self::path_for(artifact);
        let json = serde_json::to_string_pretty(self).expect("serializable manifest");
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn read_for(artifact: &Path) -> Option<RunManifest> {
        let raw = fs::read_to_string(Self::path_for(artifact)).ok()?;
        serde_json::from_str(&raw).ok()
    }
}

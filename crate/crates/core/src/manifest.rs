//! Run manifests: what a command was given and what it produced.
//!
//! Written as `manifest.txt` in the command's output directory, in the
//! `key = value` format of [`KeyValues`]:
//!
//! ```text
//! artifact.<n> = <path relative to the output directory>
//! checkpoint_format = <version>
//! command = <subcommand>
//! config.<key> = <resolved setting>
//! input.<name> = <path as given>
//! seed = <seed>
//! version = <package version>
//! ```

use std::path::Path;

use crate::checkpoint;
use crate::config::KeyValues;
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: KeyValues,
    pub inputs: Vec<(String, String)>,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            seed: None,
            config: KeyValues::default(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::default();
        kv.set("command", self.command.clone());
        kv.set("version", env!("CARGO_PKG_VERSION"));
        kv.set("checkpoint_format", checkpoint::VERSION.to_string());
        if let Some(s) = self.seed {
            kv.set("seed", s.to_string());
        }
        for k in self.config.keys() {
            kv.set(format!("config.{k}"), self.config.get_str(k).unwrap_or_default());
        }
        for (name, path) in &self.inputs {
            kv.set(format!("input.{name}"), path.clone());
        }
        for (i, a) in self.artifacts.iter().enumerate() {
            kv.set(format!("artifact.{i}"), a.clone());
        }
        kv
    }

    /// Writes `manifest.txt` into `dir` after checking that every listed
    /// artifact exists there.
    pub fn write(&self, dir: &Path) -> Result<()> {
        if let Some(missing) = self.artifacts.iter().find(|a| !dir.join(a).exists()) {
            return Err(Error::Integrity(format!("manifest lists {missing} but it was not written")));
        }
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_kv().render()).map_err(|e| Error::io(&path, e))
    }
}

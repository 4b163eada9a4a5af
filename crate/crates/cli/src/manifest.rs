//! Per-run bookkeeping: which stages finished, in what order, and which
//! files they wrote.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub name: String,
    /// Paths relative to the run directory.
    pub files: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
    pub stages: Vec<StageEntry>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash,
            seed,
            stages: Vec::new(),
        }
    }

    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let p = Self::path(dir);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
        Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let p = Self::path(dir);
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, &p).with_context(|| format!("writing {}", p.display()))?;
        Ok(())
    }

    pub fn is_done(&self, stage: &str) -> bool {
        self.stages.iter().any(|s| s.name == stage)
    }

    pub fn stage(&self, stage: &str) -> Option<&StageEntry> {
        self.stages.iter().find(|s| s.name == stage)
    }

    /// Records `stage` as the latest completed stage, replacing an earlier
    /// completion of the same name.
    pub fn complete(&mut self, stage: &str, files: Vec<String>) {
        self.stages.retain(|s| s.name != stage);
        self.stages.push(StageEntry {
            name: stage.to_string(),
            files,
        });
    }

    pub fn files(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().flat_map(|s| s.files.iter().map(String::as_str))
    }

    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if self.config_hash != hash {
            bail!(
                "run directory was created with config {} but the current config is {}; use --force or another --out",
                self.config_hash,
                hash
            );
        }
        Ok(())
    }
}

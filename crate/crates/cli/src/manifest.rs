//! Run manifest: what produced the outputs, without timestamps so identical
//! runs write identical manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{PipelineConfig, TextSource};
use crate::pipeline::Stage;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub version: u32,
    /// Config hash the stage ran under.
    pub config_sha256: String,
    /// Output file (relative to the run directory) to SHA-256.
    pub outputs: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub seed: u64,
    pub text_source: TextSource,
    pub generate_split: String,
    pub config: PipelineConfig,
    pub stages: BTreeMap<String, StageEntry>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            config_sha256: cfg.hash(),
            seed: cfg.seed,
            text_source: cfg.clip.text_source,
            generate_split: format!("{:?}", cfg.generate_split).to_lowercase(),
            config: cfg.clone(),
            stages: BTreeMap::new(),
        }
    }

    /// Keeps entries of earlier stages; the header reflects the current config.
    pub fn load_or_new(path: &Path, cfg: &PipelineConfig) -> Result<Self> {
        let mut m = Self::new(cfg);
        if path.exists() {
            let text = std::fs::read_to_string(path)?;
            let old: Manifest = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            m.stages = old.stages;
        }
        Ok(m)
    }

    pub fn record(&mut self, stage: Stage, root: &Path, outputs: &[PathBuf]) -> Result<()> {
        let mut files = BTreeMap::new();
        for p in outputs {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned();
            files.insert(rel, sha256_file(p)?);
        }
        self.stages.insert(
            stage.name().to_string(),
            StageEntry {
                version: stage.version(),
                config_sha256: self.config_sha256.clone(),
                outputs: files,
            },
        );
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
    }
}

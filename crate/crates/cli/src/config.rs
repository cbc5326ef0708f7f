//! Pipeline configuration (JSON).
//!
//! Relative paths resolve against the directory holding the config file.
//! `CRRG_SEED` in the environment overrides `seed`; per-stage `seed` fields are
//! ignored and derived from the global seed instead.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crrg_core::cliptrain::ClipTrainConfig;
use crrg_core::corpusio::{MimicAugConfig, RsnaAugConfig, Split, SplitRatios};
use crrg_core::detector::{AnchorConfig, DetectorTrainConfig};
use crrg_core::downcls::ClassifierTrainConfig;
use crrg_core::genlm::GeneratorTrainConfig;
use crrg_core::regionsel::SelectorTrainConfig;

pub const SEED_ENV: &str = "CRRG_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory with reports.jsonl, images.jsonl and scene_graphs.jsonl.
    pub mimic: PathBuf,
    /// Directory with labels.jsonl for the classification images.
    pub rsna: PathBuf,
    /// Optional published split file (JSON Lines of ids and split).
    pub split_file: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            mimic: "mimic".into(),
            rsna: "rsna".into(),
            split_file: None,
            output: "out".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    /// Radiologist FINDINGS.
    Reference,
    /// Reports produced by the generation stages.
    Generated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenCap {
    /// Use `token_num` as is.
    Fixed,
    /// Mean FINDINGS length of the training split.
    CorpusAverage,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorStage {
    pub anchors: AnchorConfig,
    pub train: DetectorTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorStage {
    pub train: GeneratorTrainConfig,
    pub token_num: usize,
    pub token_cap: TokenCap,
}

impl Default for GeneratorStage {
    fn default() -> Self {
        Self {
            train: GeneratorTrainConfig::default(),
            token_num: crrg_core::genlm::TOKEN_NUM,
            token_cap: TokenCap::Fixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipStage {
    pub train: ClipTrainConfig,
    pub text_source: TextSource,
}

impl Default for ClipStage {
    fn default() -> Self {
        Self {
            train: ClipTrainConfig::default(),
            text_source: TextSource::Generated,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierStage {
    pub train: ClassifierTrainConfig,
    pub augmentation: RsnaAugConfig,
    /// Share of labelled images held out for evaluation.
    pub holdout_fraction: f64,
}

impl Default for ClassifierStage {
    fn default() -> Self {
        Self {
            train: ClassifierTrainConfig::default(),
            augmentation: RsnaAugConfig::default(),
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: Paths,
    pub split: SplitRatios,
    pub preprocess: MimicAugConfig,
    pub detector: DetectorStage,
    pub selector: SelectorTrainConfig,
    pub generator: GeneratorStage,
    pub clip: ClipStage,
    pub classifier: ClassifierStage,
    /// Split whose records `generate` writes reports for.
    pub generate_split: Split,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let mut selector = SelectorTrainConfig::default();
        selector.bce.pos_weight = 2.0;
        Self {
            seed: 0,
            paths: Paths::default(),
            split: SplitRatios::default(),
            preprocess: MimicAugConfig::default(),
            detector: DetectorStage::default(),
            selector,
            generator: GeneratorStage::default(),
            clip: ClipStage::default(),
            classifier: ClassifierStage::default(),
            generate_split: Split::Test,
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{what} must be positive, got {v}");
    }
    Ok(())
}

fn nonzero(what: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!("{what} must be positive");
    }
    Ok(())
}

impl PipelineConfig {
    /// Reads the file, applies `CRRG_SEED`, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer"))?;
        }
        Ok(())
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.mimic);
        fix(&mut self.paths.rsna);
        fix(&mut self.paths.output);
        if let Some(p) = self.paths.split_file.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        let d = &self.detector.train;
        nonzero("detector.train.epochs", d.epochs as usize)?;
        nonzero("detector.train.batch_size", d.batch_size)?;
        positive("detector.train.learn_rate", d.learn_rate)?;
        positive(
            "detector.anchors.nms_threshold",
            self.detector.anchors.nms_threshold,
        )?;
        let s = &self.selector;
        nonzero("selector.epochs", s.epochs as usize)?;
        nonzero("selector.batch_size", s.batch_size)?;
        positive("selector.learn_rate", s.learn_rate)?;
        positive("selector.bce.pos_weight", s.bce.pos_weight)?;
        let g = &self.generator.train;
        nonzero("generator.train.epochs", g.epochs as usize)?;
        nonzero("generator.train.batch_size", g.batch_size)?;
        positive("generator.train.learn_rate", g.learn_rate)?;
        nonzero("generator.token_num", self.generator.token_num)?;
        let c = &self.clip.train;
        nonzero("clip.train.total_epochs", c.total_epochs as usize)?;
        nonzero("clip.train.batch_size", c.batch_size)?;
        positive("clip.train.learn_rate", c.learn_rate)?;
        c.weights.validate()?;
        let k = &self.classifier.train;
        nonzero("classifier.train.epochs", k.epochs as usize)?;
        nonzero("classifier.train.batch_size", k.batch_size)?;
        positive("classifier.train.learn_rate", k.learn_rate)?;
        if !(self.classifier.holdout_fraction > 0.0 && self.classifier.holdout_fraction < 1.0) {
            bail!("classifier.holdout_fraction must lie in (0,1)");
        }
        for (what, p) in [
            ("paths.mimic", &self.paths.mimic),
            ("paths.rsna", &self.paths.rsna),
        ] {
            if !p.is_dir() {
                bail!("{what} {} does not exist", p.display());
            }
        }
        if let Some(p) = &self.paths.split_file {
            if !p.is_file() {
                bail!("paths.split_file {} does not exist", p.display());
            }
        }
        if self.generate_split == Split::Unassigned {
            bail!("generate_split must be train, val or test");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_optimized_settings() {
        let c = PipelineConfig::default();
        assert_eq!(c.selector.bce.pos_weight, 2.0);
        assert_eq!(c.generator.token_num, 300);
        assert_eq!(c.clip.train.batch_size, 32);
        assert_eq!(c.clip.train.weights.text_to_text, 0.5);
        assert_eq!(c.detector.train.learn_rate, 1e-3);
        assert_eq!(c.generator.train.scheduler_patience, 3);
    }

    #[test]
    fn partial_json_fills_defaults_and_rejects_unknown() {
        let c: PipelineConfig =
            serde_json::from_str(r#"{"seed": 5, "clip": {"text_source": "reference"}}"#).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.clip.text_source, TextSource::Reference);
        assert_eq!(c.clip.train.learn_rate, 5e-5);
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sede": 5}"#).is_err());
    }
}

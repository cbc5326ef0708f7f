//! Staged pipeline: ingest, split, detector, selector, generator (phase 1),
//! CLIP and classifier (phase 2), then generate / score / classify.
//!
//! Every stage reads only artifacts written by earlier stages and fails with
//! [`PipelineError::Ordering`] naming the stage whose output is missing.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crrg_core::cliptrain::{
    image_feature_vector, train_clip, ClipArch, ClipModel, ReportImagePairs, TextEncoderKind,
    IMAGE_FEATURE_DIM,
};
use crrg_core::corpusio::{
    apply_split_file, extract_findings, join_records, read_jsonl, read_pgm, split_dataset,
    write_jsonl, ImageGrid, RsnaAugParams, Split, SplitEntry, StudyKey, StudyRecord,
    SynonymAugmenter,
};
use crrg_core::detector::{
    backbone_features, detect, region_feature, sample_anchors, train_detector, DetectorHeads,
};
use crrg_core::downcls::{
    accuracy, auc, f1_score, predict_prob, train_classifier, LinearClassifier, EMBED_DIM,
};
use crrg_core::genlm::{
    assemble_report, avg_tokens_per_report, train_generator, DecoderConfig, GenLimits, TinyDecoder,
    Vocab,
};
use crrg_core::nlgmetrics::{evaluate_report_set, MetricReport};
use crrg_core::params::ParamStore;
use crrg_core::regionsel::{train_selector, SelectorMlp};
use crrg_core::rng::{derive_seed, derived, seeded};
use crrg_core::Error as CoreError;

use crate::checkpoint::Checkpoint;
use crate::config::{PipelineConfig, TextSource, TokenCap};
use crate::manifest::Manifest;
use crate::synth::{RawImage, RawReport, RawSceneGraph, RsnaLabel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Ingest,
    Split,
    Detector,
    Selector,
    Generator,
    Clip,
    Classifier,
    Generate,
    Score,
    Classify,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::Ingest,
        Stage::Split,
        Stage::Detector,
        Stage::Selector,
        Stage::Generator,
        Stage::Clip,
        Stage::Classifier,
        Stage::Generate,
        Stage::Score,
        Stage::Classify,
    ];
    pub const TRAINING: [Stage; 5] = [
        Stage::Detector,
        Stage::Selector,
        Stage::Generator,
        Stage::Clip,
        Stage::Classifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Split => "split",
            Stage::Detector => "detector",
            Stage::Selector => "selector",
            Stage::Generator => "generator",
            Stage::Clip => "clip",
            Stage::Classifier => "classifier",
            Stage::Generate => "generate",
            Stage::Score => "score",
            Stage::Classify => "classify",
        }
    }

    /// Bumped whenever a stage's outputs change for the same inputs.
    pub fn version(self) -> u32 {
        1
    }

    fn seed(self, global: u64) -> u64 {
        derive_seed(global, 0x5747_0000 + self as u64)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}"))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(
        "stage {stage} needs the output of stage {missing}, which has not run ({path} is missing)"
    )]
    Ordering {
        stage: Stage,
        missing: Stage,
        path: PathBuf,
    },
    #[error("score inputs do not align: {0}")]
    Join(String),
}

/// Paths inside the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn records(&self) -> PathBuf {
        self.root.join("records.jsonl")
    }
    pub fn ingest_summary(&self) -> PathBuf {
        self.root.join("ingest.json")
    }
    pub fn split_summary(&self) -> PathBuf {
        self.root.join("split.json")
    }
    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{}.ckpt", stage.name()))
    }
    pub fn metrics(&self, file: &str) -> PathBuf {
        self.root.join("metrics").join(file)
    }
    pub fn gen_vocab(&self) -> PathBuf {
        self.root.join("generator_vocab.json")
    }
    pub fn clip_vocab(&self) -> PathBuf {
        self.root.join("clip_vocab.json")
    }
    pub fn clip_texts(&self) -> PathBuf {
        self.root.join("clip_texts.jsonl")
    }
    pub fn generated(&self) -> PathBuf {
        self.root.join("generated.jsonl")
    }
    pub fn references(&self) -> PathBuf {
        self.root.join("references.jsonl")
    }
    pub fn scores_csv(&self) -> PathBuf {
        self.root.join("scores.csv")
    }
    pub fn scores_json(&self) -> PathBuf {
        self.root.join("scores.json")
    }
    pub fn predictions(&self) -> PathBuf {
        self.root.join("predictions.csv")
    }
    pub fn classify_summary(&self) -> PathBuf {
        self.root.join("classify.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
}

/// One report keyed by study; the format of generated.jsonl and references.jsonl.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportLine {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    pub report: String,
}

impl ReportLine {
    fn new(key: &StudyKey, report: String) -> Self {
        Self {
            subject_id: key.subject_id.clone(),
            study_id: key.study_id.clone(),
            image_id: key.image_id.clone(),
            report,
        }
    }

    pub fn key(&self) -> StudyKey {
        StudyKey::new(&self.subject_id, &self.study_id, &self.image_id)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub records: usize,
    pub dropped_reports: usize,
    pub dropped_images: usize,
    pub dropped_graphs: usize,
    pub missing_findings: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub unassigned: usize,
    pub from_file: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub split: String,
    pub records: usize,
    pub empty_reports: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub train_images: usize,
    pub holdout_images: usize,
    pub auc: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifySummary {
    pub images: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub layout: Layout,
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("parsing {}", path.display()))
}

fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn metadata(stage: Stage, seed: u64, epoch: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        ("stage".to_string(), stage.name().to_string()),
        ("seed".to_string(), seed.to_string()),
        ("epoch".to_string(), epoch.to_string()),
        ("version".to_string(), stage.version().to_string()),
    ])
}

fn best_epoch(losses: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, l) in losses.into_iter().enumerate() {
        if l < best.1 {
            best = (i, l);
        }
    }
    best.0
}

/// A detected region with the annotation of its class, if any.
#[derive(Clone, Debug)]
pub struct RegionSample {
    pub class_id: usize,
    pub feature: Vec<f64>,
    pub label: bool,
    pub sentence: String,
}

/// Phase-1 models needed to write reports.
pub struct ReportModels {
    pub heads: DetectorHeads,
    pub selector: SelectorMlp,
    pub decoder: TinyDecoder,
    pub vocab: Vocab,
    pub limits: GenLimits,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Self {
        let layout = Layout::new(cfg.paths.output.clone());
        Self { cfg, layout }
    }

    fn require(&self, stage: Stage, missing: Stage, path: PathBuf) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(PipelineError::Ordering {
                stage,
                missing,
                path,
            }
            .into())
        }
    }

    fn load_store(&self, stage: Stage, missing: Stage, store: &mut ParamStore) -> Result<()> {
        let path = self.layout.checkpoint(missing);
        self.require(stage, missing, path.clone())?;
        Checkpoint::load(&path)
            .and_then(|ck| ck.load_into(store))
            .with_context(|| format!("loading {}", path.display()))
    }

    fn save_store(&self, stage: Stage, store: &ParamStore, epoch: usize) -> Result<()> {
        let path = self.layout.checkpoint(stage);
        Checkpoint::from_store(store, metadata(stage, stage.seed(self.cfg.seed), epoch))?
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))
    }

    fn prepare(&self) -> Result<()> {
        for dir in [
            self.layout.root.clone(),
            self.layout.root.join("checkpoints"),
            self.layout.root.join("metrics"),
        ] {
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        Ok(())
    }

    fn finish(&self, stage: Stage, outputs: &[PathBuf]) -> Result<()> {
        let mut m = Manifest::load_or_new(&self.layout.manifest(), &self.cfg)?;
        m.record(stage, &self.layout.root, outputs)?;
        m.save(&self.layout.manifest())
    }

    pub fn run(&self, stage: Stage) -> Result<()> {
        self.prepare()?;
        let outputs = match stage {
            Stage::Ingest => self.ingest()?,
            Stage::Split => self.split()?,
            Stage::Detector => self.train_detector_stage()?,
            Stage::Selector => self.train_selector_stage()?,
            Stage::Generator => self.train_generator_stage()?,
            Stage::Clip => self.train_clip_stage()?,
            Stage::Classifier => self.train_classifier_stage()?,
            Stage::Generate => self.generate()?,
            Stage::Score => {
                let (g, r) = (self.layout.generated(), self.layout.references());
                self.require(Stage::Score, Stage::Generate, g.clone())?;
                score_files(
                    &g,
                    &r,
                    &self.layout.scores_csv(),
                    &self.layout.scores_json(),
                )?;
                vec![self.layout.scores_csv(), self.layout.scores_json()]
            }
            Stage::Classify => self.classify()?,
        };
        self.finish(stage, &outputs)
    }

    /// Every stage from `from` onwards, in order.
    pub fn run_from(&self, from: Stage) -> Result<()> {
        for stage in Stage::ALL.into_iter().filter(|s| *s >= from) {
            eprintln!("[crrg] stage {stage}");
            self.run(stage)
                .with_context(|| format!("stage {stage} failed"))?;
        }
        Ok(())
    }

    pub fn ingest(&self) -> Result<Vec<PathBuf>> {
        let dir = &self.cfg.paths.mimic;
        let key = |s: &str, t: &str, i: &str| StudyKey::new(s, t, i);
        let reports: Vec<RawReport> = read_jsonl(&dir.join("reports.jsonl"))?;
        let images: Vec<RawImage> = read_jsonl(&dir.join("images.jsonl"))?;
        let graphs: Vec<RawSceneGraph> = read_jsonl(&dir.join("scene_graphs.jsonl"))?;
        let base = std::fs::canonicalize(dir)?;
        let joined = join_records(
            reports
                .into_iter()
                .map(|r| (key(&r.subject_id, &r.study_id, &r.image_id), r.report))
                .collect(),
            images
                .into_iter()
                .map(|r| {
                    let p = base.join(&r.path);
                    (
                        key(&r.subject_id, &r.study_id, &r.image_id),
                        p.to_string_lossy().into_owned(),
                    )
                })
                .collect(),
            graphs
                .into_iter()
                .map(|r| (key(&r.subject_id, &r.study_id, &r.image_id), r.regions))
                .collect(),
        )?;
        let mut summary = IngestSummary {
            dropped_reports: joined.dropped_reports,
            dropped_images: joined.dropped_images,
            dropped_graphs: joined.dropped_graphs,
            ..Default::default()
        };
        let mut records = Vec::new();
        for mut r in joined.records {
            for region in &r.regions {
                region
                    .validate()
                    .with_context(|| format!("scene graph of {}", r.key()))?;
            }
            match extract_findings(r.raw_report.as_deref().unwrap_or_default()) {
                Ok(f) => {
                    r.findings = Some(f);
                    r.raw_report = None;
                    records.push(r);
                }
                Err(CoreError::MissingSection) => summary.missing_findings += 1,
                Err(e) => return Err(e).with_context(|| format!("report of {}", r.key())),
            }
        }
        summary.records = records.len();
        write_jsonl(&self.layout.records(), &records)?;
        write_json(&self.layout.ingest_summary(), &summary)?;
        eprintln!(
            "[crrg] ingest: {} records ({} reports, {} images, {} graphs unmatched; {} without FINDINGS)",
            summary.records,
            summary.dropped_reports,
            summary.dropped_images,
            summary.dropped_graphs,
            summary.missing_findings
        );
        Ok(vec![self.layout.records(), self.layout.ingest_summary()])
    }

    pub fn split(&self) -> Result<Vec<PathBuf>> {
        self.require(Stage::Split, Stage::Ingest, self.layout.records())?;
        let mut records: Vec<StudyRecord> = read_jsonl(&self.layout.records())?;
        let (counts, from_file) = match &self.cfg.paths.split_file {
            Some(p) => (
                apply_split_file(&mut records, &read_jsonl::<SplitEntry>(p)?),
                true,
            ),
            None => (
                split_dataset(
                    &mut records,
                    &self.cfg.split,
                    Stage::Split.seed(self.cfg.seed),
                )?,
                false,
            ),
        };
        let summary = SplitSummary {
            train: counts[0],
            val: counts[1],
            test: counts[2],
            unassigned: records.len() - counts.iter().sum::<usize>(),
            from_file,
        };
        write_jsonl(&self.layout.records(), &records)?;
        write_json(&self.layout.split_summary(), &summary)?;
        eprintln!(
            "[crrg] split: {}/{}/{} ({} unassigned)",
            summary.train, summary.val, summary.test, summary.unassigned
        );
        Ok(vec![self.layout.records(), self.layout.split_summary()])
    }

    /// Records with their index in the records file, filtered by split.
    fn records_in(&self, stage: Stage, splits: &[Split]) -> Result<Vec<(usize, StudyRecord)>> {
        self.require(stage, Stage::Split, self.layout.split_summary())?;
        let records: Vec<StudyRecord> = read_jsonl(&self.layout.records())?;
        Ok(records
            .into_iter()
            .enumerate()
            .filter(|(_, r)| splits.contains(&r.split))
            .collect())
    }

    fn image(&self, r: &StudyRecord) -> Result<ImageGrid> {
        let p = Path::new(&r.image_path);
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.layout.root.join(p)
        };
        read_pgm(&p).with_context(|| format!("image of {}", r.key()))
    }

    pub fn train_detector_stage(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Detector;
        let seed = stage.seed(self.cfg.seed);
        let mut sets = [Vec::new(), Vec::new()];
        for (i, r) in self.records_in(stage, &[Split::Train, Split::Val])? {
            let grid = backbone_features(&self.image(&r)?)?;
            let samples = sample_anchors(
                &grid,
                &r.regions,
                &self.cfg.detector.anchors,
                &mut derived(seed, i as u64),
            )?;
            sets[usize::from(r.split == Split::Val)].push(samples);
        }
        let cfg = crrg_core::detector::DetectorTrainConfig {
            seed,
            ..self.cfg.detector.train.clone()
        };
        let (heads, log) = train_detector(&sets[0], &sets[1], &cfg)?;
        let csv = self.layout.metrics("detector.csv");
        write_csv(
            &csv,
            "epoch,lr,train_loss,val_loss",
            log.iter()
                .map(|l| format!("{},{},{},{}", l.epoch, l.lr, l.train_loss, l.val_loss)),
        )?;
        self.save_store(
            stage,
            &heads.params,
            best_epoch(log.iter().map(|l| l.val_loss)),
        )?;
        Ok(vec![self.layout.checkpoint(stage), csv])
    }

    fn load_detector(&self, stage: Stage) -> Result<DetectorHeads> {
        let mut heads = DetectorHeads::zeros();
        self.load_store(stage, Stage::Detector, &mut heads.params)?;
        Ok(heads)
    }

    fn load_selector(&self, stage: Stage) -> Result<SelectorMlp> {
        let mut m = SelectorMlp::new(&mut seeded(0));
        self.load_store(stage, Stage::Selector, &mut m.params)?;
        Ok(m)
    }

    /// Top detection per class with region features and matching annotations.
    pub fn detected_regions(
        &self,
        heads: &DetectorHeads,
        r: &StudyRecord,
    ) -> Result<Vec<RegionSample>> {
        let grid = backbone_features(&self.image(r)?)?;
        let mut out = Vec::new();
        for d in detect(heads, &grid, &self.cfg.detector.anchors)? {
            let gt = r.regions.iter().find(|g| g.label_id + 1 == d.class_id);
            out.push(RegionSample {
                class_id: d.class_id,
                feature: region_feature(&grid, &d.bbox)?,
                label: gt.is_some_and(|g| g.has_sentence),
                sentence: gt.map(|g| g.sentence.clone()).unwrap_or_default(),
            });
        }
        Ok(out)
    }

    fn region_sets(&self, stage: Stage, heads: &DetectorHeads) -> Result<[Vec<RegionSample>; 2]> {
        let mut sets = [Vec::new(), Vec::new()];
        for (_, r) in self.records_in(stage, &[Split::Train, Split::Val])? {
            let regions = self.detected_regions(heads, &r)?;
            sets[usize::from(r.split == Split::Val)].extend(regions);
        }
        Ok(sets)
    }

    pub fn train_selector_stage(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Selector;
        let heads = self.load_detector(stage)?;
        let [train, val] = self.region_sets(stage, &heads)?;
        let pairs = |s: &[RegionSample]| {
            s.iter()
                .map(|x| (x.feature.clone(), x.label))
                .collect::<Vec<_>>()
        };
        let (train, val) = (pairs(&train), pairs(&val));
        let cfg = crrg_core::regionsel::SelectorTrainConfig {
            seed: stage.seed(self.cfg.seed),
            ..self.cfg.selector.clone()
        };
        let (model, log) = train_selector(&train, &val, &cfg)?;
        let eval = if val.is_empty() { &train } else { &val };
        let predicted = eval
            .iter()
            .map(|(x, _)| model.select(x))
            .collect::<crrg_core::Result<Vec<_>>>()?;
        let labels: Vec<bool> = eval.iter().map(|(_, y)| *y).collect();
        eprintln!(
            "[crrg] selector: {} train regions, eval F1 {:.3}",
            train.len(),
            f1_score(&predicted, &labels)
        );
        let csv = self.layout.metrics("selector.csv");
        write_csv(
            &csv,
            "epoch,lr,train_loss,val_loss",
            log.iter()
                .map(|l| format!("{},{},{},{}", l.epoch, l.lr, l.train_loss, l.val_loss)),
        )?;
        self.save_store(
            stage,
            &model.params,
            best_epoch(log.iter().map(|l| l.val_loss)),
        )?;
        Ok(vec![self.layout.checkpoint(stage), csv])
    }

    pub fn train_generator_stage(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Generator;
        let heads = self.load_detector(stage)?;
        self.require(
            stage,
            Stage::Selector,
            self.layout.checkpoint(Stage::Selector),
        )?;
        let records = self.records_in(stage, &[Split::Train])?;
        let corpus: Vec<&str> = records
            .iter()
            .filter_map(|(_, r)| r.findings.as_deref())
            .collect();
        let vocab = Vocab::build(corpus.iter().copied());
        let [train, val] = self.region_sets(stage, &heads)?;
        let pairs = |s: &[RegionSample]| {
            s.iter()
                .filter(|x| x.label)
                .map(|x| (x.feature.clone(), x.sentence.clone()))
                .collect::<Vec<_>>()
        };
        let (train, val) = (pairs(&train), pairs(&val));
        let cfg = crrg_core::genlm::GeneratorTrainConfig {
            seed: stage.seed(self.cfg.seed),
            ..self.cfg.generator.train.clone()
        };
        let (model, log) = train_generator(&train, &val, &vocab, &cfg)?;
        eprintln!(
            "[crrg] generator: {} sentences, vocabulary {}",
            train.len(),
            vocab.len()
        );
        write_json(&self.layout.gen_vocab(), &vocab)?;
        let csv = self.layout.metrics("generator.csv");
        write_csv(
            &csv,
            "epoch,lr,train_loss,val_loss",
            log.iter()
                .map(|l| format!("{},{},{},{}", l.epoch, l.lr, l.train_loss, l.val_loss)),
        )?;
        self.save_store(
            stage,
            &model.params,
            best_epoch(log.iter().map(|l| l.val_loss)),
        )?;
        Ok(vec![
            self.layout.checkpoint(stage),
            self.layout.gen_vocab(),
            csv,
        ])
    }

    fn token_limits(&self, stage: Stage) -> Result<GenLimits> {
        let cap = match self.cfg.generator.token_cap {
            TokenCap::Fixed => self.cfg.generator.token_num,
            TokenCap::CorpusAverage => {
                let vocab: Vocab = read_json(&self.layout.gen_vocab())?;
                let train = self.records_in(stage, &[Split::Train])?;
                let corpus: Vec<&str> = train
                    .iter()
                    .filter_map(|(_, r)| r.findings.as_deref())
                    .collect();
                avg_tokens_per_report(&corpus, &vocab)?
            }
        };
        Ok(GenLimits::new(cap)?)
    }

    pub fn load_report_models(&self, stage: Stage) -> Result<ReportModels> {
        let heads = self.load_detector(stage)?;
        let selector = self.load_selector(stage)?;
        self.require(stage, Stage::Generator, self.layout.gen_vocab())?;
        let vocab: Vocab = read_json(&self.layout.gen_vocab())?;
        let mut decoder = TinyDecoder::new(DecoderConfig::new(vocab.len()), &mut seeded(0))?;
        self.load_store(stage, Stage::Generator, &mut decoder.params)?;
        Ok(ReportModels {
            heads,
            selector,
            decoder,
            vocab,
            limits: self.token_limits(stage)?,
        })
    }

    /// detect → top region per class → selector filter → decode and assemble.
    pub fn write_report(&self, m: &ReportModels, r: &StudyRecord) -> Result<String> {
        let mut chosen = Vec::new();
        for s in self.detected_regions(&m.heads, r)? {
            if m.selector.select(&s.feature)? {
                chosen.push((s.class_id, s.feature));
            }
        }
        Ok(assemble_report(&chosen, &m.decoder, &m.vocab, &m.limits)?)
    }

    pub fn generate(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Generate;
        let models = self.load_report_models(stage)?;
        let split = self.cfg.generate_split;
        let mut generated = Vec::new();
        let mut references = Vec::new();
        let mut empty = 0;
        for (_, r) in self.records_in(stage, &[split])? {
            let report = self.write_report(&models, &r)?;
            empty += usize::from(report.is_empty());
            generated.push(ReportLine::new(&r.key(), report));
            references.push(ReportLine::new(
                &r.key(),
                r.findings.clone().unwrap_or_default(),
            ));
        }
        write_jsonl(&self.layout.generated(), &generated)?;
        write_jsonl(&self.layout.references(), &references)?;
        let summary = GenerateSummary {
            split: format!("{split:?}").to_lowercase(),
            records: generated.len(),
            empty_reports: empty,
        };
        let path = self.layout.metrics("generate.json");
        write_json(&path, &summary)?;
        eprintln!(
            "[crrg] generate: {} reports for {} ({} empty)",
            summary.records, summary.split, empty
        );
        Ok(vec![
            self.layout.generated(),
            self.layout.references(),
            path,
        ])
    }

    pub fn train_clip_stage(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Clip;
        let records = self.records_in(stage, &[Split::Train, Split::Val])?;
        let models = match self.cfg.clip.text_source {
            TextSource::Reference => None,
            TextSource::Generated => Some(self.load_report_models(stage)?),
        };
        let mut lines = Vec::new();
        let mut sets: [(Vec<ImageGrid>, Vec<String>); 2] = Default::default();
        for (_, r) in &records {
            let text = match &models {
                None => r.findings.clone().unwrap_or_default(),
                Some(m) => self.write_report(m, r)?,
            };
            lines.push(ReportLine::new(&r.key(), text.clone()));
            let set = &mut sets[usize::from(r.split == Split::Val)];
            set.0.push(self.image(r)?);
            set.1.push(text);
        }
        write_jsonl(&self.layout.clip_texts(), &lines)?;
        let vocab = Vocab::build(sets[0].1.iter().map(String::as_str));
        write_json(&self.layout.clip_vocab(), &vocab)?;
        let augmenter = SynonymAugmenter::radiology();
        let [(train_img, train_txt), (val_img, val_txt)] = sets;
        let pairs = |images, texts| ReportImagePairs {
            images,
            texts,
            vocab: &vocab,
            image_aug: self.cfg.preprocess,
            text_aug: &augmenter,
        };
        let (train, val) = (pairs(train_img, train_txt), pairs(val_img, val_txt));
        let arch = ClipArch::new(
            IMAGE_FEATURE_DIM,
            TextEncoderKind::Tokens {
                vocab_size: vocab.len(),
            },
        );
        if arch.embed_dim != EMBED_DIM {
            eprintln!(
                "[crrg] warning: CLIP embedding width {} differs from classifier input {EMBED_DIM}",
                arch.embed_dim
            );
        }
        let cfg = crrg_core::cliptrain::ClipTrainConfig {
            seed: stage.seed(self.cfg.seed),
            ..self.cfg.clip.train.clone()
        };
        let outcome = train_clip(arch, &train, &val, &cfg)?;
        let csv = self.layout.metrics("clip.csv");
        write_csv(
            &csv,
            crrg_core::cliptrain::ClipEpochLog::CSV_HEADER,
            outcome.log.iter().map(|l| l.csv_row()),
        )?;
        if let Some(last) = outcome.log.last() {
            eprintln!(
                "[crrg] clip: final val retrieval top-1 {:.3}",
                last.retrieval_top1
            );
        }
        self.save_store(
            stage,
            &outcome.best.params,
            best_epoch(outcome.log.iter().map(|l| l.val_loss)),
        )?;
        Ok(vec![
            self.layout.checkpoint(stage),
            self.layout.clip_vocab(),
            self.layout.clip_texts(),
            csv,
        ])
    }

    fn load_clip(&self, stage: Stage) -> Result<ClipModel> {
        self.require(stage, Stage::Clip, self.layout.clip_vocab())?;
        let vocab: Vocab = read_json(&self.layout.clip_vocab())?;
        let arch = ClipArch::new(
            IMAGE_FEATURE_DIM,
            TextEncoderKind::Tokens {
                vocab_size: vocab.len(),
            },
        );
        let mut model = ClipModel::new(arch, &mut seeded(0));
        self.load_store(stage, Stage::Clip, &mut model.params)?;
        Ok(model)
    }

    fn rsna_labels(&self) -> Result<Vec<RsnaLabel>> {
        read_jsonl(&self.cfg.paths.rsna.join("labels.jsonl")).context("reading RSNA labels")
    }

    fn rsna_image(&self, l: &RsnaLabel) -> Result<ImageGrid> {
        read_pgm(&self.cfg.paths.rsna.join(&l.path))
            .with_context(|| format!("RSNA image {}", l.image_id))
    }

    /// Embedding of the image after `params` (identity = centre crop).
    fn embed_rsna(
        &self,
        clip: &ClipModel,
        img: &ImageGrid,
        params: &RsnaAugParams,
    ) -> Result<Vec<f64>> {
        Ok(clip.embed_image(&image_feature_vector(&params.apply(img)?)?)?)
    }

    pub fn train_classifier_stage(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Classifier;
        let seed = stage.seed(self.cfg.seed);
        let clip = self.load_clip(stage)?;
        let labels = self.rsna_labels()?;
        // stratified hold-out
        let mut rng = derived(seed, 0);
        let mut holdout = vec![false; labels.len()];
        for class in [false, true] {
            let mut idx: Vec<usize> = (0..labels.len())
                .filter(|&i| labels[i].label == class)
                .collect();
            idx.shuffle(&mut rng);
            let k = ((idx.len() as f64 * self.cfg.classifier.holdout_fraction).round() as usize)
                .min(idx.len());
            for &i in &idx[..k] {
                holdout[i] = true;
            }
        }
        let (mut xs, mut ys, mut hx, mut hy, mut hid) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (i, l) in labels.iter().enumerate() {
            let img = self.rsna_image(l)?;
            if holdout[i] {
                hx.push(self.embed_rsna(&clip, &img, &RsnaAugParams::identity())?);
                hy.push(l.label);
                hid.push(l.image_id.clone());
            } else {
                let p = self
                    .cfg
                    .classifier
                    .augmentation
                    .sample(&mut derived(seed, 1 + i as u64));
                xs.push(self.embed_rsna(&clip, &img, &p)?);
                ys.push(l.label);
            }
        }
        let cfg = crrg_core::downcls::ClassifierTrainConfig {
            seed,
            ..self.cfg.classifier.train.clone()
        };
        let model = train_classifier(&xs, &ys, &cfg)?;
        let scores = hx
            .iter()
            .map(|x| predict_prob(x, &model))
            .collect::<crrg_core::Result<Vec<_>>>()?;
        let summary = ClassifierSummary {
            train_images: xs.len(),
            holdout_images: hx.len(),
            auc: auc(&scores, &hy)?,
            accuracy: accuracy(&scores, &hy, 0.5)?,
        };
        let json = self.layout.metrics("classifier.json");
        write_json(&json, &summary)?;
        let preds = self.layout.metrics("classifier_holdout.csv");
        let rows: Vec<(String, f64, bool)> = hid
            .into_iter()
            .zip(scores)
            .zip(hy)
            .map(|((i, s), y)| (i, s, y))
            .collect();
        crrg_core::downcls::write_predictions_csv(&preds, &rows)?;
        eprintln!(
            "[crrg] classifier: hold-out AUC {:.3}, accuracy {:.3}",
            summary.auc, summary.accuracy
        );
        self.save_store(stage, &model.params, cfg.epochs as usize - 1)?;
        Ok(vec![self.layout.checkpoint(stage), json, preds])
    }

    pub fn classify(&self) -> Result<Vec<PathBuf>> {
        let stage = Stage::Classify;
        let clip = self.load_clip(stage)?;
        let mut model = LinearClassifier::zeros(EMBED_DIM);
        self.load_store(stage, Stage::Classifier, &mut model.params)?;
        let mut rows = Vec::new();
        for l in self.rsna_labels()? {
            let x = self.embed_rsna(&clip, &self.rsna_image(&l)?, &RsnaAugParams::identity())?;
            rows.push((l.image_id.clone(), predict_prob(&x, &model)?, l.label));
        }
        crrg_core::downcls::write_predictions_csv(&self.layout.predictions(), &rows)?;
        let scores: Vec<f64> = rows.iter().map(|r| r.1).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.2).collect();
        let summary = ClassifySummary {
            images: rows.len(),
            auc: auc(&scores, &labels).ok(),
            accuracy: accuracy(&scores, &labels, 0.5).ok(),
        };
        write_json(&self.layout.classify_summary(), &summary)?;
        eprintln!(
            "[crrg] classify: {} images, AUC {:?}, accuracy {:?}",
            summary.images, summary.auc, summary.accuracy
        );
        Ok(vec![
            self.layout.predictions(),
            self.layout.classify_summary(),
        ])
    }
}

/// Joins generated and reference reports on id triples and scores them.
pub fn score_reports(generated: &[ReportLine], references: &[ReportLine]) -> Result<MetricReport> {
    let index = |lines: &[ReportLine], what: &str| -> Result<BTreeMap<StudyKey, String>> {
        let mut m = BTreeMap::new();
        for l in lines {
            if m.insert(l.key(), l.report.clone()).is_some() {
                bail!(PipelineError::Join(format!(
                    "duplicate id {} in {what}",
                    l.key()
                )));
            }
        }
        Ok(m)
    };
    let g = index(generated, "generated reports")?;
    let r = index(references, "references")?;
    let orphans: Vec<String> = g
        .keys()
        .filter(|k| !r.contains_key(*k))
        .map(|k| format!("{k} (generated only)"))
        .chain(
            r.keys()
                .filter(|k| !g.contains_key(*k))
                .map(|k| format!("{k} (reference only)")),
        )
        .collect();
    if !orphans.is_empty() {
        bail!(PipelineError::Join(format!(
            "orphan ids: {}",
            orphans.join(", ")
        )));
    }
    let pairs: Vec<(String, String)> = g.into_iter().map(|(k, v)| (v, r[&k].clone())).collect();
    Ok(evaluate_report_set(&pairs)?)
}

pub fn score_files(
    generated: &Path,
    references: &Path,
    csv: &Path,
    json: &Path,
) -> Result<MetricReport> {
    let g: Vec<ReportLine> = read_jsonl(generated)?;
    let r: Vec<ReportLine> = read_jsonl(references)?;
    let report = score_reports(&g, &r)?;
    write_csv(csv, &MetricReport::csv_header(), [report.csv_row()])?;
    write_json(json, &report)?;
    Ok(report)
}

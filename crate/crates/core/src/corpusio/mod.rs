//! Study records, ID-based joining of the report / image / scene-graph
//! sources, FINDINGS extraction, deterministic splits, and preprocessing.

mod image;
mod text;

pub use image::{
    augment_rsna_image, preprocess_mimic_image, read_pgm, resize_bilinear, write_pgm, ImageGrid,
    MimicAugConfig, MimicAugParams, Normalization, RsnaAugConfig, RsnaAugParams, MIMIC_SIZE,
    RSNA_SIZE,
};
pub use text::{
    augment_text, extract_findings, IdentityAugmenter, SynonymAugmenter, TextAugmenter,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::detgeom::{BBox, NUM_REGIONS};
use crate::error::{input_err, Error, Result};
use crate::rng::seeded;

/// `(subject_id, study_id, image_id)`; orders lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StudyKey {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
}

impl StudyKey {
    pub fn new(
        subject: impl Into<String>,
        study: impl Into<String>,
        image: impl Into<String>,
    ) -> Self {
        Self {
            subject_id: subject.into(),
            study_id: study.into(),
            image_id: image.into(),
        }
    }
}

impl std::fmt::Display for StudyKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/{}", self.subject_id, self.study_id, self.image_id)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAnnotation {
    pub label_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub has_sentence: bool,
    #[serde(default)]
    pub sentence: String,
}

impl RegionAnnotation {
    pub fn new(label_id: usize, bbox: BBox, sentence: impl Into<String>) -> Result<Self> {
        let sentence = sentence.into();
        let r = Self {
            label_id,
            bbox,
            has_sentence: !sentence.is_empty(),
            sentence,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if self.label_id >= NUM_REGIONS {
            return input_err(format!("region label {} >= {NUM_REGIONS}", self.label_id));
        }
        if self.has_sentence == self.sentence.is_empty() {
            return input_err("has_sentence must be true exactly when the sentence is nonempty");
        }
        Ok(())
    }
}

/// One joined study: identity, image reference, FINDINGS text and region annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRecord {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    /// Path of the PGM image, relative to the records file unless absolute.
    #[serde(default)]
    pub image_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub findings: Option<String>,
    /// Unprocessed report text; cleared once FINDINGS are extracted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_report: Option<String>,
    #[serde(default)]
    pub regions: Vec<RegionAnnotation>,
    #[serde(default)]
    pub split: Split,
}

impl StudyRecord {
    pub fn key(&self) -> StudyKey {
        StudyKey::new(&self.subject_id, &self.study_id, &self.image_id)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct JoinOutcome {
    pub records: Vec<StudyRecord>,
    pub dropped_reports: usize,
    pub dropped_images: usize,
    pub dropped_graphs: usize,
}

fn index_unique<T>(
    source: &'static str,
    items: Vec<(StudyKey, T)>,
) -> Result<BTreeMap<StudyKey, T>> {
    let mut map = BTreeMap::new();
    for (k, v) in items {
        if map.contains_key(&k) {
            return Err(Error::Integrity(format!("duplicate id {k} in {source}")));
        }
        map.insert(k, v);
    }
    Ok(map)
}

/// Inner join of the three sources on the full id triple.
///
/// Output is sorted by id triple; the raw report lands in `raw_report`.
pub fn join_records(
    reports: Vec<(StudyKey, String)>,
    images: Vec<(StudyKey, String)>,
    scene_graphs: Vec<(StudyKey, Vec<RegionAnnotation>)>,
) -> Result<JoinOutcome> {
    let reports = index_unique("reports", reports)?;
    let mut images = index_unique("images", images)?;
    let mut graphs = index_unique("scene graphs", scene_graphs)?;
    let (n_rep, n_img, n_graph) = (reports.len(), images.len(), graphs.len());

    let mut records = Vec::new();
    for (key, raw) in reports {
        let (Some(path), true) = (images.get(&key), graphs.contains_key(&key)) else {
            continue;
        };
        let path = path.clone();
        images.remove(&key);
        let regions = graphs.remove(&key).unwrap_or_default();
        records.push(StudyRecord {
            subject_id: key.subject_id,
            study_id: key.study_id,
            image_id: key.image_id,
            image_path: path,
            findings: None,
            raw_report: Some(raw),
            regions,
            split: Split::Unassigned,
        });
    }
    let n = records.len();
    Ok(JoinOutcome {
        records,
        dropped_reports: n_rep - n,
        dropped_images: n_img - n,
        dropped_graphs: n_graph - n,
    })
}

/// Train/val/test proportions on a scale summing to 10.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 7.0,
            val: 1.5,
            test: 1.5,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0 && r.is_finite())) {
            return input_err("split ratios must be nonnegative");
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 10.0).abs() > 1e-9 {
            return input_err(format!("split ratios must sum to 10, got {sum}"));
        }
        Ok(())
    }

    /// Largest-remainder apportionment of `n` items; ties go train, val, test.
    pub fn apportion(&self, n: usize) -> Result<[usize; 3]> {
        self.validate()?;
        let quotas = [self.train, self.val, self.test].map(|r| n as f64 * r / 10.0);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        let frac = |i: usize| quotas[i] - quotas[i].floor();
        // stable sort keeps train < val < test among equal remainders
        order.sort_by(|&a, &b| {
            let (fa, fb) = (frac(a), frac(b));
            if (fa - fb).abs() <= 1e-9 {
                std::cmp::Ordering::Equal
            } else {
                fb.total_cmp(&fa)
            }
        });
        for &i in order.iter().take(n.saturating_sub(assigned)) {
            counts[i] += 1;
        }
        Ok(counts)
    }
}

/// Shuffles with a seeded permutation and assigns splits; returns `[train, val, test]` counts.
pub fn split_dataset(
    records: &mut [StudyRecord],
    ratios: &SplitRatios,
    seed: u64,
) -> Result<[usize; 3]> {
    let counts = ratios.apportion(records.len())?;
    let mut perm: Vec<usize> = (0..records.len()).collect();
    perm.shuffle(&mut seeded(seed));
    for (rank, &i) in perm.iter().enumerate() {
        records[i].split = if rank < counts[0] {
            Split::Train
        } else if rank < counts[0] + counts[1] {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(counts)
}

/// One line of an explicit split file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitEntry {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    pub split: Split,
}

/// Applies a predefined split; records absent from the file become `Unassigned`.
pub fn apply_split_file(records: &mut [StudyRecord], entries: &[SplitEntry]) -> [usize; 3] {
    let map: BTreeMap<StudyKey, Split> = entries
        .iter()
        .map(|e| {
            (
                StudyKey::new(&e.subject_id, &e.study_id, &e.image_id),
                e.split,
            )
        })
        .collect();
    let mut counts = [0; 3];
    for r in records.iter_mut() {
        r.split = map.get(&r.key()).copied().unwrap_or(Split::Unassigned);
        match r.split {
            Split::Train => counts[0] += 1,
            Split::Val => counts[1] += 1,
            Split::Test => counts[2] += 1,
            Split::Unassigned => {}
        }
    }
    counts
}

/// Reads any JSON Lines file, skipping blank lines.
pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn key(i: usize) -> StudyKey {
        StudyKey::new(format!("p{i}"), format!("s{i}"), format!("i{i}"))
    }

    #[test]
    fn join_empty() {
        let out = join_records(vec![], vec![], vec![]).unwrap();
        assert!(out.records.is_empty());
    }

    #[test]
    fn join_counts_drops() {
        let reports = (0..3)
            .map(|i| (key(i), format!("FINDINGS: r{i}")))
            .collect();
        let images = vec![(key(2), "b.pgm".to_string()), (key(0), "a.pgm".to_string())];
        let graphs = vec![(key(0), vec![]), (key(2), vec![])];
        let out = join_records(reports, images, graphs).unwrap();
        let keys: Vec<StudyKey> = out.records.iter().map(StudyRecord::key).collect();
        // set-intersection oracle
        let a: BTreeSet<_> = (0..3).map(key).collect();
        let b: BTreeSet<_> = [key(0), key(2)].into_iter().collect();
        let expect: Vec<_> = a.intersection(&b).cloned().collect();
        assert_eq!(keys, expect);
        assert_eq!(
            (out.dropped_reports, out.dropped_images, out.dropped_graphs),
            (1, 0, 0)
        );
        assert_eq!(out.records[1].image_path, "b.pgm");
    }

    #[test]
    fn join_requires_all_three() {
        let out = join_records(
            vec![(key(1), "x".into())],
            vec![(key(1), "x.pgm".into())],
            vec![],
        )
        .unwrap();
        assert!(out.records.is_empty());
        assert_eq!(out.dropped_reports, 1);
    }

    #[test]
    fn join_rejects_duplicates() {
        let err = join_records(
            vec![(key(1), "a".into()), (key(1), "b".into())],
            vec![],
            vec![],
        );
        assert!(matches!(err, Err(Error::Integrity(_))));
    }

    #[test]
    fn apportion_examples() {
        let r = SplitRatios::default();
        assert_eq!(r.apportion(10_000).unwrap(), [7000, 1500, 1500]);
        assert_eq!(r.apportion(0).unwrap(), [0, 0, 0]);
        assert_eq!(r.apportion(10).unwrap(), [7, 2, 1]);
        let neg = SplitRatios {
            train: 11.0,
            val: -1.0,
            test: 0.0,
        };
        assert!(neg.apportion(5).is_err());
    }

    #[test]
    fn split_file_overrides() {
        let mut recs: Vec<StudyRecord> = (0..3)
            .map(|i| StudyRecord {
                subject_id: format!("p{i}"),
                study_id: format!("s{i}"),
                image_id: format!("i{i}"),
                image_path: String::new(),
                findings: None,
                raw_report: None,
                regions: vec![],
                split: Split::Unassigned,
            })
            .collect();
        let entries = vec![
            SplitEntry {
                subject_id: "p0".into(),
                study_id: "s0".into(),
                image_id: "i0".into(),
                split: Split::Test,
            },
            SplitEntry {
                subject_id: "p2".into(),
                study_id: "s2".into(),
                image_id: "i2".into(),
                split: Split::Train,
            },
        ];
        assert_eq!(apply_split_file(&mut recs, &entries), [1, 0, 1]);
        assert_eq!(recs[1].split, Split::Unassigned);
    }

    #[test]
    fn region_annotation_invariants() {
        let bx = BBox::new(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!(RegionAnnotation::new(28, bx, "").is_ok());
        assert!(RegionAnnotation::new(29, bx, "").is_err());
        let bad = RegionAnnotation {
            label_id: 1,
            bbox: bx,
            has_sentence: true,
            sentence: String::new(),
        };
        assert!(bad.validate().is_err());
    }
}

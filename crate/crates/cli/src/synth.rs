//! Synthetic fixture corpus in the raw input layout.
//!
//! `mimic/` holds reports.jsonl, images.jsonl, scene_graphs.jsonl and 512×512
//! PGM radiographs whose 29 template regions are jittered per study; abnormal
//! regions are brightened by a finding-specific amount and carry a sentence.
//! `rsna/` holds labels.jsonl and 256×256 PGMs, positives showing an opacity.

use std::path::Path;

use anyhow::{Context, Result};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crrg_core::corpusio::{write_jsonl, write_pgm, ImageGrid, RegionAnnotation, MIMIC_SIZE};
use crrg_core::detgeom::{BBox, NUM_REGIONS};
use crrg_core::rng::{derived, Rng};

pub const REGION_NAMES: [&str; NUM_REGIONS] = [
    "right lung",
    "right upper lung zone",
    "right mid lung zone",
    "right lower lung zone",
    "right hilar structures",
    "right apical zone",
    "right costophrenic angle",
    "right hemidiaphragm",
    "left lung",
    "left upper lung zone",
    "left mid lung zone",
    "left lower lung zone",
    "left hilar structures",
    "left apical zone",
    "left costophrenic angle",
    "left hemidiaphragm",
    "trachea",
    "right clavicle",
    "left clavicle",
    "aortic arch",
    "upper mediastinum",
    "svc",
    "cardiac silhouette",
    "cavoatrial junction",
    "right atrium",
    "carina",
    "abdomen",
    "spine",
    "mediastinum",
];

/// Template boxes `[x1, y1, x2, y2]` on the 512-pixel canvas.
const TEMPLATE: [[f64; 4]; NUM_REGIONS] = [
    [48.0, 64.0, 232.0, 416.0],
    [64.0, 80.0, 224.0, 192.0],
    [64.0, 192.0, 224.0, 304.0],
    [64.0, 304.0, 224.0, 400.0],
    [168.0, 176.0, 232.0, 272.0],
    [80.0, 48.0, 208.0, 112.0],
    [48.0, 368.0, 112.0, 432.0],
    [64.0, 400.0, 232.0, 464.0],
    [280.0, 64.0, 464.0, 416.0],
    [288.0, 80.0, 448.0, 192.0],
    [288.0, 192.0, 448.0, 304.0],
    [288.0, 304.0, 448.0, 400.0],
    [280.0, 176.0, 344.0, 272.0],
    [304.0, 48.0, 432.0, 112.0],
    [400.0, 368.0, 464.0, 432.0],
    [280.0, 400.0, 448.0, 464.0],
    [232.0, 16.0, 280.0, 144.0],
    [64.0, 32.0, 232.0, 80.0],
    [280.0, 32.0, 448.0, 80.0],
    [248.0, 112.0, 320.0, 176.0],
    [208.0, 80.0, 304.0, 176.0],
    [200.0, 128.0, 248.0, 224.0],
    [192.0, 240.0, 352.0, 400.0],
    [200.0, 256.0, 256.0, 320.0],
    [192.0, 288.0, 256.0, 384.0],
    [232.0, 144.0, 280.0, 192.0],
    [96.0, 448.0, 416.0, 512.0],
    [240.0, 16.0, 272.0, 480.0],
    [192.0, 96.0, 320.0, 400.0],
];

/// (finding, added brightness)
const FINDINGS: [(&str, f32); 3] = [
    ("opacity", 0.25),
    ("effusion", 0.4),
    ("consolidation", 0.55),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub studies: usize,
    pub rsna_images: usize,
    /// Probability that a region is abnormal.
    pub abnormal_rate: f64,
    /// Share of reports written without a FINDINGS section.
    pub missing_findings_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            studies: 120,
            rsna_images: 96,
            abnormal_rate: 0.08,
            missing_findings_rate: 0.03,
            seed: 7,
        }
    }
}

#[derive(Serialize, Deserialize)]
pub struct RawReport {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    pub report: String,
}

#[derive(Serialize, Deserialize)]
pub struct RawImage {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    pub path: String,
}

#[derive(Serialize, Deserialize)]
pub struct RawSceneGraph {
    pub subject_id: String,
    pub study_id: String,
    pub image_id: String,
    pub regions: Vec<RegionAnnotation>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RsnaLabel {
    pub image_id: String,
    pub path: String,
    pub label: bool,
}

pub fn region_sentence(label_id: usize, finding: &str) -> String {
    format!("{finding} in the {}.", REGION_NAMES[label_id])
}

fn noise_canvas(size: usize, base: f32, rng: &mut Rng) -> Vec<f32> {
    (0..size * size)
        .map(|i| {
            let y = (i / size) as f32 / size as f32;
            base + 0.05 * y + rng.random_range(-0.02f32..0.02)
        })
        .collect()
}

fn paint(pixels: &mut [f32], size: usize, b: &BBox, delta: f32) {
    let (x1, y1) = (b.x1.max(0.0) as usize, b.y1.max(0.0) as usize);
    let (x2, y2) = ((b.x2 as usize).min(size), (b.y2 as usize).min(size));
    for y in y1..y2 {
        for p in &mut pixels[y * size + x1..y * size + x2] {
            *p += delta;
        }
    }
}

fn clamp_grid(size: usize, pixels: Vec<f32>) -> Result<ImageGrid> {
    Ok(ImageGrid::new(
        size,
        size,
        pixels.into_iter().map(|p| p.clamp(0.0, 1.0)).collect(),
    )?)
}

/// One study: image, regions and report text.
fn study(index: usize, cfg: &SynthConfig) -> Result<(ImageGrid, Vec<RegionAnnotation>, String)> {
    let mut rng = derived(cfg.seed, index as u64);
    let size = MIMIC_SIZE;
    let mut pixels = noise_canvas(size, 0.15, &mut rng);
    let (dx, dy) = (rng.random_range(-8.0..=8.0), rng.random_range(-8.0..=8.0));
    let mut regions = Vec::with_capacity(NUM_REGIONS);
    let mut sentences = Vec::new();
    for (label_id, t) in TEMPLATE.iter().enumerate() {
        let bbox = BBox::new(t[0] + dx, t[1] + dy, t[2] + dx, t[3] + dy)?
            .clip(size as f64, size as f64)
            .context("template box leaves the canvas")?;
        paint(&mut pixels, size, &bbox, 0.02);
        let sentence = if rng.random_bool(cfg.abnormal_rate) {
            let (finding, delta) = FINDINGS[rng.random_range(0..FINDINGS.len())];
            paint(&mut pixels, size, &bbox, delta);
            let s = region_sentence(label_id, finding);
            sentences.push(s.clone());
            s
        } else {
            String::new()
        };
        regions.push(RegionAnnotation::new(label_id, bbox, sentence)?);
    }
    let impression = if sentences.is_empty() {
        "No acute cardiopulmonary process."
    } else {
        "Abnormal study."
    };
    let body = if sentences.is_empty() {
        "no acute cardiopulmonary process.".to_string()
    } else {
        sentences.join("\n")
    };
    let report = if rng.random_bool(cfg.missing_findings_rate) {
        format!("EXAMINATION: chest radiograph.\nIMPRESSION: {impression}")
    } else {
        format!("EXAMINATION: chest radiograph.\nFINDINGS: {body}\nIMPRESSION: {impression}")
    };
    Ok((clamp_grid(size, pixels)?, regions, report))
}

fn ids(i: usize) -> (String, String, String) {
    (
        format!("p{:04}", i / 2),
        format!("s{i:05}"),
        format!("img{i:05}"),
    )
}

/// Writes `root/mimic` and `root/rsna`.
pub fn write_fixture(root: &Path, cfg: &SynthConfig) -> Result<()> {
    let mimic = root.join("mimic");
    let rsna = root.join("rsna");
    std::fs::create_dir_all(mimic.join("images"))?;
    std::fs::create_dir_all(rsna.join("images"))?;
    let mut reports = Vec::new();
    let mut images = Vec::new();
    let mut graphs = Vec::new();
    for i in 0..cfg.studies {
        let (img, regions, report) = study(i, cfg)?;
        let (subject_id, study_id, image_id) = ids(i);
        let rel = format!("images/{image_id}.pgm");
        write_pgm(&mimic.join(&rel), &img)?;
        reports.push(RawReport {
            subject_id: subject_id.clone(),
            study_id: study_id.clone(),
            image_id: image_id.clone(),
            report,
        });
        images.push(RawImage {
            subject_id: subject_id.clone(),
            study_id: study_id.clone(),
            image_id: image_id.clone(),
            path: rel,
        });
        graphs.push(RawSceneGraph {
            subject_id,
            study_id,
            image_id,
            regions,
        });
    }
    // one report without image or graph, exercising the inner join
    let (subject_id, study_id, image_id) = ids(cfg.studies);
    reports.push(RawReport {
        subject_id,
        study_id,
        image_id,
        report: "FINDINGS: orphan report.".into(),
    });
    write_jsonl(&mimic.join("reports.jsonl"), &reports)?;
    write_jsonl(&mimic.join("images.jsonl"), &images)?;
    write_jsonl(&mimic.join("scene_graphs.jsonl"), &graphs)?;

    let size = 256;
    let mut labels = Vec::new();
    for i in 0..cfg.rsna_images {
        let mut rng = derived(cfg.seed ^ 0x5253_4E41, i as u64);
        let mut pixels = noise_canvas(size, 0.2, &mut rng);
        let label = i % 2 == 1;
        if label {
            let (cx, cy) = (
                rng.random_range(70.0..186.0f64),
                rng.random_range(70.0..186.0f64),
            );
            let r = rng.random_range(24.0..40.0f64);
            for (k, p) in pixels.iter_mut().enumerate() {
                let (x, y) = ((k % size) as f64, (k / size) as f64);
                if (x - cx).powi(2) + (y - cy).powi(2) < r * r {
                    *p += 0.5;
                }
            }
        }
        let image_id = format!("rsna{i:04}");
        let rel = format!("images/{image_id}.pgm");
        write_pgm(&rsna.join(&rel), &clamp_grid(size, pixels)?)?;
        labels.push(RsnaLabel {
            image_id,
            path: rel,
            label,
        });
    }
    write_jsonl(&rsna.join("labels.jsonl"), &labels)?;
    Ok(())
}

//! Desk-scale anatomical region detector.
//!
//! A fixed feature extractor stands in for the convolutional backbone; on top
//! of it a logistic objectness scorer, a linear 30-class head and a linear
//! box-offset regressor are trained on per-anchor feature vectors.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpusio::{ImageGrid, RegionAnnotation};
use crate::detgeom::{
    decode_deltas, encode_deltas, generate_anchors, iou, nms, roi_pool,
    select_top_region_per_class, BBox, BoxDeltas, Detection, FeatureGrid, BACKGROUND, NUM_CLASSES,
};
use crate::error::{check_len, input_err, Result};
use crate::nn::{affine, affine_backward, log_softmax, sigmoid};
use crate::optimkit::{adamw_step, AdamWConfig, AdamWState, PlateauMode, PlateauScheduler};
use crate::params::{ParamStore, TensorId};
use crate::regionsel::{bce_with_logits, BceConfig};
use crate::rng::{derived, Rng};

/// Pixels per feature cell.
pub const STRIDE: usize = 32;
/// Sub-block grid inside each cell; each sub-block mean is one channel.
pub const SUB_BLOCKS: usize = 4;
pub const CHANNELS: usize = SUB_BLOCKS * SUB_BLOCKS;
/// Pooled size of region features (`CHANNELS × 8 × 8 = 1024`).
pub const REGION_POOL: usize = 8;
pub const REGION_FEATURE_DIM: usize = CHANNELS * REGION_POOL * REGION_POOL;
const ANCHOR_POOL: usize = 2;
const GEOMETRY_FEATURES: usize = 10;
pub const ANCHOR_FEATURE_DIM: usize = CHANNELS * ANCHOR_POOL * ANCHOR_POOL + GEOMETRY_FEATURES;

/// Feature grid of an image: one cell per `STRIDE × STRIDE` block, channels are
/// the means of its `SUB_BLOCKS × SUB_BLOCKS` sub-blocks.
pub fn backbone_features(img: &ImageGrid) -> Result<FeatureGrid> {
    if img.width < STRIDE || img.height < STRIDE {
        return input_err(format!("image smaller than one {STRIDE}-pixel cell"));
    }
    let (gw, gh) = (img.width / STRIDE, img.height / STRIDE);
    let sub = STRIDE / SUB_BLOCKS;
    let mut values = vec![0f32; CHANNELS * gh * gw];
    for gy in 0..gh {
        for gx in 0..gw {
            for sy in 0..SUB_BLOCKS {
                for sx in 0..SUB_BLOCKS {
                    let mut acc = 0f64;
                    for y in 0..sub {
                        let row = (gy * STRIDE + sy * sub + y) * img.width + gx * STRIDE + sx * sub;
                        acc += img.pixels[row..row + sub]
                            .iter()
                            .map(|&p| f64::from(p))
                            .sum::<f64>();
                    }
                    let c = sy * SUB_BLOCKS + sx;
                    values[(c * gh + gy) * gw + gx] = (acc / (sub * sub) as f64) as f32;
                }
            }
        }
    }
    FeatureGrid::new(CHANNELS, gh, gw, values)
}

fn to_cells(bbox: &BBox) -> BBox {
    bbox.scaled(1.0 / STRIDE as f64)
}

/// Flattened `8 × 8` max-pool of a pixel-space box.
pub fn region_feature(grid: &FeatureGrid, bbox: &BBox) -> Result<Vec<f64>> {
    let pooled = roi_pool(grid, &to_cells(bbox), REGION_POOL, REGION_POOL)?;
    Ok(pooled.values.iter().map(|&v| f64::from(v)).collect())
}

/// Pooled appearance plus quadratic geometry of one anchor.
pub fn anchor_feature(grid: &FeatureGrid, anchor: &BBox) -> Result<Vec<f64>> {
    let pooled = roi_pool(grid, &to_cells(anchor), ANCHOR_POOL, ANCHOR_POOL)?;
    let (w, h) = ((grid.width * STRIDE) as f64, (grid.height * STRIDE) as f64);
    let (cx, cy) = anchor.center();
    let (x, y) = (cx / w - 0.5, cy / h - 0.5);
    let (lw, lh) = ((anchor.width() / w).ln(), (anchor.height() / h).ln());
    let mut f: Vec<f64> = pooled.values.iter().map(|&v| f64::from(v)).collect();
    f.extend([
        x,
        y,
        x * x + y * y,
        x * x,
        y * y,
        x * y,
        lw,
        lh,
        lw * lw,
        lh * lh,
    ]);
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub nms_threshold: f64,
    /// Anchors at or above this IoU with a region are positives.
    pub positive_iou: f64,
    /// Anchors below this IoU with every region are negatives.
    pub negative_iou: f64,
    /// Sampled negatives per positive.
    pub negative_ratio: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            scales: vec![32.0, 64.0, 128.0, 256.0, 512.0],
            ratios: vec![0.5, 1.0, 2.0],
            nms_threshold: 0.7,
            positive_iou: 0.5,
            negative_iou: 0.3,
            negative_ratio: 3,
        }
    }
}

impl AnchorConfig {
    pub fn anchors(&self, grid: &FeatureGrid) -> Result<Vec<BBox>> {
        generate_anchors(
            grid.height,
            grid.width,
            STRIDE as f64,
            &self.scales,
            &self.ratios,
        )
    }
}

/// Objectness, class and offset heads over anchor features (`det.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorHeads {
    pub params: ParamStore,
    obj_w: TensorId,
    obj_b: TensorId,
    cls_w: TensorId,
    cls_b: TensorId,
    reg_w: TensorId,
    reg_b: TensorId,
}

/// Head outputs for one anchor.
pub struct AnchorOutput {
    pub objectness: f64,
    pub class_logits: Vec<f64>,
    pub deltas: BoxDeltas,
}

/// One training anchor: features and targets.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSample {
    pub feature: Vec<f64>,
    pub positive: bool,
    pub class_id: usize,
    pub deltas: Option<BoxDeltas>,
}

impl DetectorHeads {
    /// Zero-initialized heads (the objective is convex in each head).
    pub fn zeros() -> Self {
        let f = ANCHOR_FEATURE_DIM;
        let mut params = ParamStore::new();
        let obj_w = params.add("det.objectness.weight", &[1, f]);
        let obj_b = params.add("det.objectness.bias", &[1]);
        let cls_w = params.add("det.classifier.weight", &[NUM_CLASSES, f]);
        let cls_b = params.add("det.classifier.bias", &[NUM_CLASSES]);
        let reg_w = params.add("det.regressor.weight", &[4, f]);
        let reg_b = params.add("det.regressor.bias", &[4]);
        Self {
            params,
            obj_w,
            obj_b,
            cls_w,
            cls_b,
            reg_w,
            reg_b,
        }
    }

    pub fn forward(&self, feature: &[f64]) -> Result<AnchorOutput> {
        check_len("anchor feature", ANCHOR_FEATURE_DIM, feature.len())?;
        let p = &self.params;
        let obj = affine(p.get(self.obj_w), p.get(self.obj_b), feature)[0];
        let reg = affine(p.get(self.reg_w), p.get(self.reg_b), feature);
        Ok(AnchorOutput {
            objectness: obj,
            class_logits: affine(p.get(self.cls_w), p.get(self.cls_b), feature),
            deltas: BoxDeltas::from_array([reg[0], reg[1], reg[2], reg[3]]),
        })
    }

    /// Objectness BCE + class cross-entropy + squared offset error on positives;
    /// accumulates `scale ×` the gradient.
    pub fn loss_and_grad(&self, s: &AnchorSample, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let out = self.forward(&s.feature)?;
        let p = &self.params;
        let (l_obj, d_obj) = bce_with_logits(out.objectness, s.positive, &BceConfig::default());
        {
            let (dw, db) = p.slot_pair(grad, self.obj_w, self.obj_b);
            affine_backward(
                p.get(self.obj_w),
                &s.feature,
                &[d_obj * scale],
                dw,
                db,
                None,
            );
        }
        let lp = log_softmax(&out.class_logits);
        let l_cls = -lp[s.class_id];
        let d_cls: Vec<f64> = lp
            .iter()
            .enumerate()
            .map(|(k, l)| (l.exp() - f64::from(u8::from(k == s.class_id))) * scale)
            .collect();
        {
            let (dw, db) = p.slot_pair(grad, self.cls_w, self.cls_b);
            affine_backward(p.get(self.cls_w), &s.feature, &d_cls, dw, db, None);
        }
        let mut l_reg = 0.0;
        if let Some(target) = s.deltas {
            let pred = out.deltas.to_array();
            let t = target.to_array();
            let d: Vec<f64> = (0..4).map(|k| (pred[k] - t[k]) * scale).collect();
            l_reg = (0..4).map(|k| 0.5 * (pred[k] - t[k]).powi(2)).sum::<f64>();
            let (dw, db) = p.slot_pair(grad, self.reg_w, self.reg_b);
            affine_backward(p.get(self.reg_w), &s.feature, &d, dw, db, None);
        }
        Ok(l_obj + l_cls + l_reg)
    }

    pub fn loss(&self, s: &AnchorSample) -> Result<f64> {
        let mut scratch = self.params.zeros_like();
        self.loss_and_grad(s, 0.0, &mut scratch)
    }
}

/// Regions as detector classes: annotation label `k` is class `k + 1`.
pub fn region_class(r: &RegionAnnotation) -> usize {
    r.label_id + 1
}

/// Labels anchors against annotated regions and samples negatives.
pub fn sample_anchors(
    grid: &FeatureGrid,
    regions: &[RegionAnnotation],
    cfg: &AnchorConfig,
    rng: &mut Rng,
) -> Result<Vec<AnchorSample>> {
    let anchors = cfg.anchors(grid)?;
    let mut best_for_region = vec![(0.0f64, usize::MAX); regions.len()];
    let mut matched: Vec<(f64, usize)> = Vec::with_capacity(anchors.len());
    for (a, anchor) in anchors.iter().enumerate() {
        let mut best = (0.0, usize::MAX);
        for (r, region) in regions.iter().enumerate() {
            let v = iou(anchor, &region.bbox);
            if v > best.0 {
                best = (v, r);
            }
            if v > best_for_region[r].0 {
                best_for_region[r] = (v, a);
            }
        }
        matched.push(best);
    }
    for (r, &(v, a)) in best_for_region.iter().enumerate() {
        if v > 0.0 {
            matched[a] = (matched[a].0.max(cfg.positive_iou), r);
        }
    }
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for (a, &(v, r)) in matched.iter().enumerate() {
        if v >= cfg.positive_iou && r != usize::MAX {
            positives.push((a, r));
        } else if v < cfg.negative_iou {
            negatives.push(a);
        }
    }
    negatives.shuffle(rng);
    negatives.truncate((cfg.negative_ratio * positives.len()).max(16));
    negatives.sort_unstable();
    let mut out = Vec::with_capacity(positives.len() + negatives.len());
    for (a, r) in positives {
        let region = &regions[r];
        out.push(AnchorSample {
            feature: anchor_feature(grid, &anchors[a])?,
            positive: true,
            class_id: region_class(region),
            deltas: Some(encode_deltas(&anchors[a], &region.bbox)),
        });
    }
    for a in negatives {
        out.push(AnchorSample {
            feature: anchor_feature(grid, &anchors[a])?,
            positive: false,
            class_id: BACKGROUND,
            deltas: None,
        });
    }
    Ok(out)
}

/// Candidates per class kept before suppression.
pub const PRE_NMS_TOP: usize = 32;

/// Scores every anchor for every anatomical class (`σ(objectness)·p(class)`),
/// keeps the best [`PRE_NMS_TOP`] anchors per class, decodes and clips their
/// boxes, applies per-class NMS and keeps the best detection per class.
pub fn detect(
    heads: &DetectorHeads,
    grid: &FeatureGrid,
    cfg: &AnchorConfig,
) -> Result<Vec<Detection>> {
    let anchors = cfg.anchors(grid)?;
    let (w, h) = ((grid.width * STRIDE) as f64, (grid.height * STRIDE) as f64);
    let mut outputs = Vec::with_capacity(anchors.len());
    let mut per_class: Vec<Vec<(f64, usize)>> = vec![Vec::new(); NUM_CLASSES];
    for (a, anchor) in anchors.iter().enumerate() {
        let out = heads.forward(&anchor_feature(grid, anchor)?)?;
        let obj = sigmoid(out.objectness);
        for (k, l) in log_softmax(&out.class_logits).iter().enumerate().skip(1) {
            per_class[k].push(((obj * l.exp()).clamp(0.0, 1.0), a));
        }
        outputs.push(out.deltas);
    }
    let mut dets = Vec::new();
    for (k, cands) in per_class.iter_mut().enumerate().skip(1) {
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(score, a) in cands.iter().take(PRE_NMS_TOP) {
            if let Some(bbox) = decode_deltas(&anchors[a], &outputs[a])?.clip(w, h) {
                dets.push(Detection::new(bbox, k, score)?);
            }
        }
    }
    let kept: Vec<Detection> = nms(&dets, cfg.nms_threshold)
        .into_iter()
        .map(|i| dets[i])
        .collect();
    Ok(select_top_region_per_class(&kept))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorTrainConfig {
    pub epochs: u32,
    /// Images per optimizer step.
    pub batch_size: usize,
    pub learn_rate: f64,
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_cooldown: u32,
    pub scheduler_patience: u32,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learn_rate: 1e-3,
            weight_decay: 0.0,
            scheduler_factor: 0.5,
            scheduler_cooldown: 5,
            scheduler_patience: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

fn mean_image_loss(heads: &DetectorHeads, images: &[Vec<AnchorSample>]) -> Result<f64> {
    let mut total = 0.0;
    for samples in images {
        let mut l = 0.0;
        for s in samples {
            l += heads.loss(s)?;
        }
        total += l / samples.len().max(1) as f64;
    }
    Ok(total / images.len().max(1) as f64)
}

/// Trains the heads on pre-sampled anchors, one inner list per image.
/// Returns the best-validation heads (training loss when `val` is empty).
pub fn train_detector(
    train: &[Vec<AnchorSample>],
    val: &[Vec<AnchorSample>],
    cfg: &DetectorTrainConfig,
) -> Result<(DetectorHeads, Vec<DetectorEpochLog>)> {
    if train.iter().all(Vec::is_empty) {
        return input_err("detector training set has no anchors");
    }
    if cfg.batch_size == 0 {
        return input_err("batch size must be positive");
    }
    let mut heads = DetectorHeads::zeros();
    let mut rng = derived(cfg.seed, 0xDE7);
    let mut opt = AdamWConfig::new(cfg.learn_rate, cfg.weight_decay)?;
    let mut state = AdamWState::new(heads.params.len());
    let mut sched = PlateauScheduler::new(
        cfg.learn_rate,
        cfg.scheduler_factor,
        cfg.scheduler_patience,
        cfg.scheduler_cooldown,
        PlateauMode::Min,
    )?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = heads.params.zeros_like();
            for &i in batch {
                let samples = &train[i];
                let scale = 1.0 / (batch.len() * samples.len().max(1)) as f64;
                for s in samples {
                    train_loss += heads.loss_and_grad(s, scale, &mut grad)? / samples.len() as f64;
                }
            }
            adamw_step(heads.params.data_mut(), &grad, &mut state, &opt)?;
        }
        train_loss /= train.len() as f64;
        let val_loss = if val.is_empty() {
            mean_image_loss(&heads, train)?
        } else {
            mean_image_loss(&heads, val)?
        };
        log.push(DetectorEpochLog {
            epoch,
            lr: opt.learn_rate,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, heads.params.clone()));
        }
        opt.learn_rate = sched.step(val_loss)?;
    }
    if let Some((_, p)) = best {
        heads.params = p;
    }
    Ok((heads, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimkit::{finite_diff_grad, relative_error};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn ramp(size: usize) -> ImageGrid {
        let pixels = (0..size * size)
            .map(|i| ((i % size) as f32) / size as f32)
            .collect();
        ImageGrid::new(size, size, pixels).unwrap()
    }

    #[test]
    fn backbone_shape_and_means() {
        let g = backbone_features(&ImageGrid::filled(64, 96, 0.25)).unwrap();
        assert_eq!((g.channels, g.height, g.width), (CHANNELS, 3, 2));
        assert!(g.values.iter().all(|&v| v == 0.25));
        let g = backbone_features(&ramp(512)).unwrap();
        // channel 0 is the left-most sub-block; its mean grows with the column
        assert!(g.at(0, 0, 1) > g.at(0, 0, 0));
        assert_eq!(
            region_feature(&g, &BBox::new(0.0, 0.0, 512.0, 512.0).unwrap())
                .unwrap()
                .len(),
            1024
        );
    }

    #[test]
    fn head_gradient_matches_fd() {
        let mut rng = seeded(9);
        let mut heads = DetectorHeads::zeros();
        for p in heads.params.data_mut() {
            *p = rng.random_range(-0.3..0.3);
        }
        let feature: Vec<f64> = (0..ANCHOR_FEATURE_DIM)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let s = AnchorSample {
            feature,
            positive: true,
            class_id: 7,
            deltas: Some(BoxDeltas::from_array([0.1, -0.2, 0.3, 0.05])),
        };
        let mut grad = heads.params.zeros_like();
        heads.loss_and_grad(&s, 1.0, &mut grad).unwrap();
        let x0 = heads.params.data().to_vec();
        let fd = finite_diff_grad(
            |x: &[f64]| {
                heads.params.data_mut().copy_from_slice(x);
                heads.loss(&s).unwrap()
            },
            &x0,
            1e-6,
        )
        .unwrap();
        assert!(relative_error(&grad, &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn training_reduces_loss_and_detects() {
        let img = ramp(256);
        let grid = backbone_features(&img).unwrap();
        let regions = vec![
            RegionAnnotation::new(0, BBox::new(0.0, 0.0, 128.0, 128.0).unwrap(), "").unwrap(),
            RegionAnnotation::new(4, BBox::new(128.0, 128.0, 256.0, 256.0).unwrap(), "x").unwrap(),
        ];
        let cfg = AnchorConfig {
            scales: vec![64.0, 128.0],
            ..Default::default()
        };
        let samples = sample_anchors(&grid, &regions, &cfg, &mut seeded(1)).unwrap();
        assert!(samples.iter().any(|s| s.positive && s.class_id == 5));
        let tcfg = DetectorTrainConfig {
            epochs: 30,
            batch_size: 1,
            learn_rate: 0.05,
            ..Default::default()
        };
        let (heads, log) = train_detector(&[samples], &[], &tcfg).unwrap();
        assert!(log.last().unwrap().val_loss < log[0].val_loss);
        let dets = detect(&heads, &grid, &cfg).unwrap();
        assert!(dets.len() <= 29);
        assert!(dets.windows(2).all(|w| w[0].class_id < w[1].class_id));
        for r in &regions {
            let d = dets
                .iter()
                .find(|d| d.class_id == region_class(r))
                .expect("class detected");
            let (cx, cy) = d.bbox.center();
            assert!(cx > r.bbox.x1 && cx < r.bbox.x2 && cy > r.bbox.y1 && cy < r.bbox.y2);
        }
    }
}

//! Detection-head geometry: anchors, IoU, per-class NMS, box-offset
//! regression, ROI max pooling and per-class top-region selection.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};

/// Number of classes in the detection head: background plus 29 anatomical regions.
pub const NUM_CLASSES: usize = 30;
/// Number of anatomical regions.
pub const NUM_REGIONS: usize = 29;
/// Class id reserved for background.
pub const BACKGROUND: usize = 0;

/// Axis-aligned box with half-open pixel edges; serializes as `[x1, y1, x2, y2]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return input_err("box coordinates must be finite");
        }
        if !(x2 > x1 && y2 > y1) {
            return input_err(format!("degenerate box [{x1}, {y1}, {x2}, {y2}]"));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Multiplies every coordinate by `s` (e.g. pixel to feature-cell units).
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            x1: self.x1 * s,
            y1: self.y1 * s,
            x2: self.x2 * s,
            y2: self.y2 * s,
        }
    }

    /// Intersection with `[0, w] × [0, h]`, if it has positive area.
    pub fn clip(&self, w: f64, h: f64) -> Option<Self> {
        let x1 = self.x1.max(0.0);
        let y1 = self.y1.max(0.0);
        let x2 = self.x2.min(w);
        let y2 = self.y2.min(h);
        (x2 > x1 && y2 > y1).then_some(Self { x1, y1, x2, y2 })
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub class_id: usize,
    pub score: f64,
}

impl Detection {
    pub fn new(bbox: BBox, class_id: usize, score: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return input_err(format!("score {score} outside [0,1]"));
        }
        if class_id >= NUM_CLASSES {
            return input_err(format!("class id {class_id} >= {NUM_CLASSES}"));
        }
        Ok(Self {
            bbox,
            class_id,
            score,
        })
    }
}

/// `channels × height × width` grid of 32-bit values.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return input_err("feature grid dimensions must be positive");
        }
        crate::error::check_len(
            "feature grid values",
            channels * height * width,
            values.len(),
        )?;
        Ok(Self {
            channels,
            height,
            width,
            values,
        })
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }
}

/// Center/size offsets relating an anchor to a target box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDeltas {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
}

impl BoxDeltas {
    pub fn to_array(self) -> [f64; 4] {
        [self.tx, self.ty, self.tw, self.th]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self {
            tx: a[0],
            ty: a[1],
            tw: a[2],
            th: a[3],
        }
    }
}

/// Anchors for every cell, scale and aspect ratio, in that nesting order.
pub fn generate_anchors(
    grid_h: usize,
    grid_w: usize,
    stride: f64,
    scales: &[f64],
    ratios: &[f64],
) -> Result<Vec<BBox>> {
    if scales
        .iter()
        .chain(ratios)
        .any(|v| !(*v > 0.0 && v.is_finite()))
    {
        return input_err("anchor scales and ratios must be positive");
    }
    if !(stride > 0.0) {
        return input_err("anchor stride must be positive");
    }
    let mut out = Vec::with_capacity(grid_h * grid_w * scales.len() * ratios.len());
    for i in 0..grid_h {
        for j in 0..grid_w {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in scales {
                for &r in ratios {
                    let root = r.sqrt();
                    out.push(BBox::from_center(cx, cy, s * root, s / root)?);
                }
            }
        }
    }
    Ok(out)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Greedy per-class suppression. Returns kept indices in ascending order.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .total_cmp(&detections[a].score)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let d = &detections[i];
        let suppressed = kept.iter().any(|&k| {
            detections[k].class_id == d.class_id
                && iou(&detections[k].bbox, &d.bbox) > iou_threshold
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    kept
}

/// Exponent bound applied when decoding width/height offsets.
const MAX_LOG_SCALE: f64 = 20.0;

pub fn encode_deltas(anchor: &BBox, target: &BBox) -> BoxDeltas {
    let (acx, acy) = anchor.center();
    let (tcx, tcy) = target.center();
    BoxDeltas {
        tx: (tcx - acx) / anchor.width(),
        ty: (tcy - acy) / anchor.height(),
        tw: (target.width() / anchor.width()).ln(),
        th: (target.height() / anchor.height()).ln(),
    }
}

pub fn decode_deltas(anchor: &BBox, deltas: &BoxDeltas) -> Result<BBox> {
    let d = deltas.to_array();
    if d.iter().any(|v| !v.is_finite()) {
        return input_err("box deltas must be finite");
    }
    let (acx, acy) = anchor.center();
    let cx = acx + deltas.tx * anchor.width();
    let cy = acy + deltas.ty * anchor.height();
    let w = (deltas.tw.min(MAX_LOG_SCALE).exp() * anchor.width()).max(f64::MIN_POSITIVE);
    let h = (deltas.th.min(MAX_LOG_SCALE).exp() * anchor.height()).max(f64::MIN_POSITIVE);
    let (x1, x2) = (cx - w / 2.0, cx + w / 2.0);
    let (y1, y2) = (cy - h / 2.0, cy + h / 2.0);
    // keep positive extent even when the half-width underflows against the center
    Ok(BBox {
        x1,
        y1,
        x2: if x2 > x1 { x2 } else { next_up(x1) },
        y2: if y2 > y1 { y2 } else { next_up(y1) },
    })
}

fn next_up(v: f64) -> f64 {
    if v == 0.0 {
        f64::MIN_POSITIVE
    } else if v > 0.0 {
        f64::from_bits(v.to_bits() + 1)
    } else {
        f64::from_bits(v.to_bits() - 1)
    }
}

/// Half-open cell range `[start, end)` covered by bin `k` of `bins`.
fn bin_range(start: usize, len: usize, k: usize, bins: usize) -> (usize, usize) {
    let lo = start + (k * len) / bins;
    let hi = start + ((k + 1) * len).div_ceil(bins);
    (lo, hi.max(lo + 1))
}

/// Max-pools `grid` over `bbox` (in cell units) into `out_h × out_w` bins.
pub fn roi_pool(
    grid: &FeatureGrid,
    bbox: &BBox,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureGrid> {
    if out_h == 0 || out_w == 0 {
        return input_err("roi output size must be positive");
    }
    let clipped = bbox
        .clip(grid.width as f64, grid.height as f64)
        .ok_or_else(|| Error::Input("roi box lies outside the feature grid".into()))?;
    let x0 = clipped.x1.floor() as usize;
    let y0 = clipped.y1.floor() as usize;
    let x_end = (clipped.x2.ceil() as usize).min(grid.width);
    let y_end = (clipped.y2.ceil() as usize).min(grid.height);
    let (len_w, len_h) = (x_end - x0, y_end - y0);

    let mut values = Vec::with_capacity(grid.channels * out_h * out_w);
    for c in 0..grid.channels {
        let plane = &grid.values[c * grid.height * grid.width..(c + 1) * grid.height * grid.width];
        for by in 0..out_h {
            let (ys, ye) = bin_range(y0, len_h, by, out_h);
            for bx in 0..out_w {
                let (xs, xe) = bin_range(x0, len_w, bx, out_w);
                let mut m = f32::NEG_INFINITY;
                for y in ys..ye {
                    for &v in &plane[y * grid.width + xs..y * grid.width + xe] {
                        m = m.max(v);
                    }
                }
                values.push(m);
            }
        }
    }
    FeatureGrid::new(grid.channels, out_h, out_w, values)
}

/// Highest-scoring detection for each non-background class, sorted by class id.
pub fn select_top_region_per_class(detections: &[Detection]) -> Vec<Detection> {
    let mut best: Vec<Option<usize>> = vec![None; NUM_CLASSES];
    for (i, d) in detections.iter().enumerate() {
        if d.class_id == BACKGROUND || d.class_id >= NUM_CLASSES {
            continue;
        }
        let slot = &mut best[d.class_id];
        match slot {
            Some(j) if detections[*j].score >= d.score => {}
            _ => *slot = Some(i),
        }
    }
    best.into_iter().flatten().map(|i| detections[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(bx: BBox, class_id: usize, score: f64) -> Detection {
        Detection::new(bx, class_id, score).unwrap()
    }

    #[test]
    fn single_anchor_geometry() {
        let a = generate_anchors(1, 1, 16.0, &[32.0], &[1.0]).unwrap();
        assert_eq!(a, vec![b(-8.0, -8.0, 24.0, 24.0)]);
        assert_eq!(
            generate_anchors(2, 2, 16.0, &[32.0], &[1.0]).unwrap().len(),
            4
        );
        let tall = generate_anchors(1, 1, 16.0, &[32.0], &[4.0]).unwrap()[0];
        assert!((tall.width() - 2.0 * 32.0).abs() < 1e-12);
        assert!((tall.width() / tall.height() - 4.0).abs() < 1e-12);
        assert!(generate_anchors(1, 1, 16.0, &[0.0], &[1.0]).is_err());
        assert!(generate_anchors(1, 1, 16.0, &[32.0], &[-1.0]).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert!((iou(&a, &b(1.0, 1.0, 3.0, 3.0)) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn nms_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(nms(&[det(a, 1, 0.5)], 0.5), vec![0]);
        assert_eq!(nms(&[det(a, 1, 0.8), det(a, 1, 0.9)], 0.5), vec![1]);
        assert_eq!(nms(&[det(a, 1, 0.8), det(a, 2, 0.9)], 0.5), vec![0, 1]);
        // equal scores: lower index survives
        assert_eq!(nms(&[det(a, 3, 0.7), det(a, 3, 0.7)], 0.5), vec![0]);
    }

    #[test]
    fn delta_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(encode_deltas(&a, &a).to_array(), [0.0; 4]);
        let d = encode_deltas(&a, &b(2.0, 2.0, 12.0, 12.0));
        assert!((d.tx - 0.2).abs() < 1e-15 && (d.ty - 0.2).abs() < 1e-15);
        assert_eq!((d.tw, d.th), (0.0, 0.0));
        let g = b(3.0, -1.0, 7.5, 20.0);
        let r = decode_deltas(&a, &encode_deltas(&a, &g)).unwrap();
        for (x, y) in <[f64; 4]>::from(r).iter().zip(<[f64; 4]>::from(g).iter()) {
            assert!((x - y).abs() < 1e-9);
        }
        let bad = BoxDeltas {
            tx: f64::NAN,
            ty: 0.0,
            tw: 0.0,
            th: 0.0,
        };
        assert!(decode_deltas(&a, &bad).is_err());
    }

    #[test]
    fn roi_pool_quadrants() {
        let g = FeatureGrid::new(1, 4, 4, (1..=16).map(|v| v as f32).collect()).unwrap();
        let out = roi_pool(&g, &b(0.0, 0.0, 4.0, 4.0), 2, 2).unwrap();
        assert_eq!(out.values, vec![6.0, 8.0, 14.0, 16.0]);
        let one = roi_pool(&g, &b(0.5, 0.5, 2.5, 2.5), 1, 1).unwrap();
        assert_eq!(one.values, vec![11.0]);
        let c = FeatureGrid::new(2, 3, 3, vec![0.25; 18]).unwrap();
        let out = roi_pool(&c, &b(0.0, 0.0, 3.0, 3.0), 4, 4).unwrap();
        assert!(out.values.iter().all(|&v| v == 0.25));
        assert!(roi_pool(&g, &b(10.0, 10.0, 12.0, 12.0), 2, 2).is_err());
    }

    #[test]
    fn top_region_selection() {
        assert!(select_top_region_per_class(&[]).is_empty());
        let a = b(0.0, 0.0, 1.0, 1.0);
        let out = select_top_region_per_class(&[det(a, 3, 0.7), det(a, 3, 0.9)]);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
        let out = select_top_region_per_class(&[
            det(a, 5, 0.2),
            det(a, 0, 0.99),
            det(a, 2, 0.4),
            det(a, 9, 0.3),
            det(a, 2, 0.4),
        ]);
        assert_eq!(
            out.iter().map(|d| d.class_id).collect::<Vec<_>>(),
            vec![2, 5, 9]
        );
    }

    #[test]
    fn bbox_json_is_array() {
        let a = b(1.0, 2.0, 3.0, 4.0);
        assert_eq!(serde_json::to_string(&a).unwrap(), "[1.0,2.0,3.0,4.0]");
        assert!(serde_json::from_str::<BBox>("[3,0,1,1]").is_err());
    }
}

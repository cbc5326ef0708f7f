//! Brute-force geometry references.

use crrg_core::detgeom::{BBox, Detection, FeatureGrid};

fn overlap(a1: f64, a2: f64, b1: f64, b2: f64) -> f64 {
    if a2 <= b1 || b2 <= a1 {
        0.0
    } else {
        let lo = if a1 > b1 { a1 } else { b1 };
        let hi = if a2 < b2 { a2 } else { b2 };
        hi - lo
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x1, a.x2, b.x1, b.x2) * overlap(a.y1, a.y2, b.y1, b.y2);
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if inter == 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// O(n²): a detection survives unless a surviving same-class detection ranks above it and overlaps too much.
pub fn nms(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let ranks_above = |j: usize, i: usize| {
        dets[j].score > dets[i].score || (dets[j].score == dets[i].score && j < i)
    };
    let mut rank: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| ranks_above(j, i)).count())
        .collect();
    let mut alive = vec![false; n];
    for r in 0..n {
        let i = rank.iter().position(|&x| x == r).unwrap();
        rank[i] = usize::MAX;
        alive[i] = !(0..n).any(|j| {
            alive[j]
                && dets[j].class_id == dets[i].class_id
                && iou(&dets[j].bbox, &dets[i].bbox) > thr
        });
    }
    (0..n).filter(|&i| alive[i]).collect()
}

/// Visits every cell of the clipped box and assigns it to each bin whose quantized span contains it.
pub fn roi_pool(grid: &FeatureGrid, b: &BBox, out_h: usize, out_w: usize) -> Vec<f32> {
    let x1 = b.x1.max(0.0);
    let y1 = b.y1.max(0.0);
    let x2 = b.x2.min(grid.width as f64);
    let y2 = b.y2.min(grid.height as f64);
    let (x0, xe) = (x1.floor(), x2.ceil());
    let (y0, ye) = (y1.floor(), y2.ceil());
    let span = |start: f64, len: f64, k: usize, bins: usize| {
        let lo = start + (k as f64 * len / bins as f64).floor();
        let hi = (start + ((k + 1) as f64 * len / bins as f64).ceil()).max(lo + 1.0);
        (lo, hi)
    };
    let mut out = vec![f32::NEG_INFINITY; grid.channels * out_h * out_w];
    for c in 0..grid.channels {
        for y in 0..grid.height {
            for x in 0..grid.width {
                let v = grid.values[(c * grid.height + y) * grid.width + x];
                for by in 0..out_h {
                    let (ly, hy) = span(y0, ye - y0, by, out_h);
                    if !((y as f64) >= ly && (y as f64) < hy) {
                        continue;
                    }
                    for bx in 0..out_w {
                        let (lx, hx) = span(x0, xe - x0, bx, out_w);
                        if (x as f64) >= lx && (x as f64) < hx {
                            let o = &mut out[(c * out_h + by) * out_w + bx];
                            *o = o.max(v);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Max over every cell touched by the clipped box.
pub fn region_max(grid: &FeatureGrid, b: &BBox, c: usize) -> f32 {
    let mut m = f32::NEG_INFINITY;
    for y in 0..grid.height {
        for x in 0..grid.width {
            let inside = (x as f64) + 1.0 > b.x1
                && (x as f64) < b.x2
                && (y as f64) + 1.0 > b.y1
                && (y as f64) < b.y2;
            if inside {
                m = m.max(grid.values[(c * grid.height + y) * grid.width + x]);
            }
        }
    }
    m
}

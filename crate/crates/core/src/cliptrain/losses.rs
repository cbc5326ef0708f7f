//! Contrastive objectives over unit-norm embeddings.
//!
//! Similarities are plain dot products: callers pass unit vectors, so these
//! equal cosines, and the returned gradients are those of the dot-product form.

use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};
use crate::nn::dot;

pub type Embeddings = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub image_to_image: f64,
    pub text_to_text: f64,
    pub loss_ratio: f64,
    /// Weight on the multi-view supervised term.
    #[serde(default = "one")]
    pub multi_view: f64,
    pub temperature: f64,
    pub triplet_margin: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            image_to_image: 1.0,
            text_to_text: 0.5,
            loss_ratio: 1.0,
            multi_view: 1.0,
            temperature: 0.07,
            triplet_margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return input_err("temperature must be positive");
        }
        if !(self.triplet_margin > 0.0) {
            return input_err("triplet margin must be positive");
        }
        Ok(())
    }
}

/// Two augmented views per modality for each of `B` instances.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub img1: Embeddings,
    pub img2: Embeddings,
    pub txt1: Embeddings,
    pub txt2: Embeddings,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.img1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img1.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let b = self.len();
        if b < 2 {
            return input_err("a view batch needs at least two instances");
        }
        if [self.img2.len(), self.txt1.len(), self.txt2.len()]
            .iter()
            .any(|&n| n != b)
        {
            return input_err("every instance needs two image and two text views");
        }
        Ok(())
    }
}

/// Gradients for the four view sets of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewGrads {
    pub img1: Embeddings,
    pub img2: Embeddings,
    pub txt1: Embeddings,
    pub txt2: Embeddings,
}

impl ViewGrads {
    fn zeros(batch: &ViewBatch) -> Self {
        let z = |e: &Embeddings| e.iter().map(|v| vec![0.0; v.len()]).collect();
        Self {
            img1: z(&batch.img1),
            img2: z(&batch.img2),
            txt1: z(&batch.txt1),
            txt2: z(&batch.txt2),
        }
    }
}

fn axpy(acc: &mut [Vec<f64>], src: &[Vec<f64>], w: f64) {
    for (a, s) in acc.iter_mut().zip(src) {
        for (x, y) in a.iter_mut().zip(s) {
            *x += w * y;
        }
    }
}

fn zeros_like(e: &[Vec<f64>]) -> Embeddings {
    e.iter().map(|v| vec![0.0; v.len()]).collect()
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Symmetric InfoNCE: mean of the a→b and b→a cross-entropies at the diagonal.
pub fn icl_loss(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> Result<(f64, Embeddings, Embeddings)> {
    let n = a.len();
    if n < 2 || b.len() != n {
        return input_err("ICL needs two equal-length sets of at least two embeddings");
    }
    if !(tau > 0.0) {
        return input_err("temperature must be positive");
    }
    let s: Vec<Vec<f64>> = a
        .iter()
        .map(|ai| b.iter().map(|bj| dot(ai, bj) / tau).collect())
        .collect();
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(s[i].iter().copied())).collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| log_sum_exp((0..n).map(|i| s[i][j])))
        .collect();
    let mut loss = 0.0;
    for i in 0..n {
        loss += (row_lse[i] - s[i][i]) + (col_lse[i] - s[i][i]);
    }
    loss /= 2.0 * n as f64;

    let mut ga = zeros_like(a);
    let mut gb = zeros_like(b);
    let scale = 1.0 / (2.0 * n as f64 * tau);
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { 1.0 } else { 0.0 };
            let p = (s[i][j] - row_lse[i]).exp();
            let q = (s[i][j] - col_lse[j]).exp();
            let g = (p + q - 2.0 * delta) * scale;
            if g == 0.0 {
                continue;
            }
            for (x, y) in ga[i].iter_mut().zip(&b[j]) {
                *x += g * y;
            }
            for (x, y) in gb[j].iter_mut().zip(&a[i]) {
                *x += g * y;
            }
        }
    }
    Ok((loss, ga, gb))
}

/// Supervised-contrastive loss over all `4B` views; positives of a view are
/// the other three views of its instance.
pub fn mvs_loss(batch: &ViewBatch, tau: f64) -> Result<(f64, ViewGrads)> {
    batch.validate()?;
    if !(tau > 0.0) {
        return input_err("temperature must be positive");
    }
    let b = batch.len();
    let views: Vec<&Vec<f64>> = batch
        .img1
        .iter()
        .chain(&batch.img2)
        .chain(&batch.txt1)
        .chain(&batch.txt2)
        .collect();
    let total = views.len();
    let mut grads: Vec<Vec<f64>> = views.iter().map(|v| vec![0.0; v.len()]).collect();
    let mut loss = 0.0;
    let n_pos = 3.0;
    for a in 0..total {
        let z: Vec<f64> = (0..total).map(|k| dot(views[a], views[k]) / tau).collect();
        let lse = log_sum_exp((0..total).filter(|&k| k != a).map(|k| z[k]));
        let mut la = 0.0;
        for k in (0..total).filter(|&k| k != a && k % b == a % b) {
            la += lse - z[k];
        }
        loss += la / n_pos;
        for k in (0..total).filter(|&k| k != a) {
            let positive = if k % b == a % b { 1.0 / n_pos } else { 0.0 };
            let g = ((z[k] - lse).exp() - positive) / (total as f64 * tau);
            for d in 0..views[a].len() {
                grads[a][d] += g * views[k][d];
                grads[k][d] += g * views[a][d];
            }
        }
    }
    loss /= total as f64;
    let mut it = grads.into_iter();
    let mut take = || (&mut it).take(b).collect::<Vec<_>>();
    let out = ViewGrads {
        img1: take(),
        img2: take(),
        txt1: take(),
        txt2: take(),
    };
    Ok((loss, out))
}

/// Hardest-negative triplet hinge, symmetric over image and text anchors.
pub fn tcl_loss(
    img: &[Vec<f64>],
    txt: &[Vec<f64>],
    margin: f64,
) -> Result<(f64, Embeddings, Embeddings)> {
    let n = img.len();
    if n < 2 || txt.len() != n {
        return input_err("TCL needs two equal-length sets of at least two embeddings");
    }
    let mut gi = zeros_like(img);
    let mut gt = zeros_like(txt);
    let mut loss = 0.0;
    let w = 1.0 / (2 * n) as f64;
    // direction 0: image anchors against text; direction 1: text anchors against images
    for dir in 0..2 {
        let (anchors, others) = if dir == 0 { (img, txt) } else { (txt, img) };
        for i in 0..n {
            let s_pos = dot(&anchors[i], &others[i]);
            let mut neg = usize::MAX;
            let mut s_neg = f64::NEG_INFINITY;
            for j in (0..n).filter(|&j| j != i) {
                let s = dot(&anchors[i], &others[j]);
                if s > s_neg {
                    s_neg = s;
                    neg = j;
                }
            }
            let hinge = margin - s_pos + s_neg;
            if hinge <= 0.0 {
                continue;
            }
            loss += hinge * w;
            let (ga, go) = if dir == 0 {
                (&mut gi, &mut gt)
            } else {
                (&mut gt, &mut gi)
            };
            for d in 0..anchors[i].len() {
                ga[i][d] += w * (others[neg][d] - others[i][d]);
                go[i][d] -= w * anchors[i][d];
                go[neg][d] += w * anchors[i][d];
            }
        }
    }
    Ok((loss, gi, gt))
}

/// Per-term values of [`combined_loss`], unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub cross_icl: f64,
    pub tcl: f64,
    pub image_icl: f64,
    pub text_icl: f64,
    pub mvs: f64,
}

/// `loss_ratio·(ICL(img1,txt1) + TCL(img1,txt1)) + image_to_image·ICL(img1,img2)
///  + text_to_text·ICL(txt1,txt2) + multi_view·MVS`.
pub fn combined_loss(batch: &ViewBatch, w: &LossWeights) -> Result<(f64, LossTerms, ViewGrads)> {
    batch.validate()?;
    w.validate()?;
    let tau = w.temperature;
    let mut grads = ViewGrads::zeros(batch);

    let (cross, gi, gt) = icl_loss(&batch.img1, &batch.txt1, tau)?;
    axpy(&mut grads.img1, &gi, w.loss_ratio);
    axpy(&mut grads.txt1, &gt, w.loss_ratio);
    let (tcl, gi, gt) = tcl_loss(&batch.img1, &batch.txt1, w.triplet_margin)?;
    axpy(&mut grads.img1, &gi, w.loss_ratio);
    axpy(&mut grads.txt1, &gt, w.loss_ratio);
    let (image_icl, g1, g2) = icl_loss(&batch.img1, &batch.img2, tau)?;
    axpy(&mut grads.img1, &g1, w.image_to_image);
    axpy(&mut grads.img2, &g2, w.image_to_image);
    let (text_icl, g1, g2) = icl_loss(&batch.txt1, &batch.txt2, tau)?;
    axpy(&mut grads.txt1, &g1, w.text_to_text);
    axpy(&mut grads.txt2, &g2, w.text_to_text);
    let (mvs, gm) = mvs_loss(batch, tau)?;
    axpy(&mut grads.img1, &gm.img1, w.multi_view);
    axpy(&mut grads.img2, &gm.img2, w.multi_view);
    axpy(&mut grads.txt1, &gm.txt1, w.multi_view);
    axpy(&mut grads.txt2, &gm.txt2, w.multi_view);

    let terms = LossTerms {
        cross_icl: cross,
        tcl,
        image_icl,
        text_icl,
        mvs,
    };
    let total = w.loss_ratio * (cross + tcl)
        + w.image_to_image * image_icl
        + w.text_to_text * text_icl
        + w.multi_view * mvs;
    Ok((total, terms, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(i: usize, d: usize) -> Vec<f64> {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn icl_orthonormal_pair() {
        let a = vec![e(0, 2), e(1, 2)];
        let (l, _, _) = icl_loss(&a, &a, 1.0).unwrap();
        assert!((l - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn icl_uniform_is_ln_b() {
        let a = vec![e(0, 3); 4];
        let (l, _, _) = icl_loss(&a, &a, 0.07).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!(icl_loss(&a[..1], &a[..1], 1.0).is_err());
    }

    #[test]
    fn icl_cold_limit() {
        let a = vec![e(0, 2), e(1, 2)];
        let (l, _, _) = icl_loss(&a, &a, 1e-3).unwrap();
        assert!(l < 1e-300 || l == 0.0);
    }

    #[test]
    fn mvs_identical_views_orthogonal_instances() {
        let inst = [e(0, 2), e(1, 2)];
        let batch = ViewBatch {
            img1: inst.to_vec(),
            img2: inst.to_vec(),
            txt1: inst.to_vec(),
            txt2: inst.to_vec(),
        };
        let (l, _) = mvs_loss(&batch, 1.0).unwrap();
        assert!((l - (3.0 + 4.0 / std::f64::consts::E).ln()).abs() < 1e-12);
    }

    #[test]
    fn mvs_collapsed_is_ln_4b_minus_1() {
        let v = vec![e(2, 4); 3];
        let batch = ViewBatch {
            img1: v.clone(),
            img2: v.clone(),
            txt1: v.clone(),
            txt2: v,
        };
        let (l, _) = mvs_loss(&batch, 0.5).unwrap();
        assert!((l - 11f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tcl_examples() {
        let a = vec![e(0, 2), e(1, 2)];
        assert_eq!(tcl_loss(&a, &a, 0.3).unwrap().0, 0.0);
        let same = vec![e(0, 2); 3];
        assert!((tcl_loss(&same, &same, 0.3).unwrap().0 - 0.3).abs() < 1e-15);
        let r = 0.59f64.sqrt();
        let img = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let txt = vec![vec![0.5, 0.4, r, 0.0], vec![0.4, 0.5, 0.0, r]];
        assert!((tcl_loss(&img, &txt, 0.3).unwrap().0 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn combined_reduces_to_icl() {
        let a = vec![e(0, 3), e(1, 3), e(2, 3)];
        let batch = ViewBatch {
            img1: a.clone(),
            img2: a.clone(),
            txt1: a.clone(),
            txt2: a.clone(),
        };
        let w = LossWeights {
            image_to_image: 0.0,
            text_to_text: 0.0,
            multi_view: 0.0,
            ..Default::default()
        };
        let (total, terms, _) = combined_loss(&batch, &w).unwrap();
        assert_eq!(terms.tcl, 0.0);
        assert_eq!(total, icl_loss(&a, &a, w.temperature).unwrap().0);
    }
}

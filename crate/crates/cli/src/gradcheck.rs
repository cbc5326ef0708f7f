//! Analytic gradients against central finite differences at random points.

use anyhow::Result;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crrg_core::cliptrain::{combined_loss, icl_loss, mvs_loss, tcl_loss, LossWeights, ViewBatch};
use crrg_core::downcls::LinearClassifier;
use crrg_core::genlm::{lm_loss, DecoderConfig, TinyDecoder, REGION_FEATURE_DIM};
use crrg_core::optimkit::{finite_diff_grad_at, relative_error};
use crrg_core::params::ParamStore;
use crrg_core::regionsel::{bce_with_logits, BceConfig, SelectorMlp};
use crrg_core::rng::{derived, Rng};

pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-5;
const FLOOR: f64 = 1e-10;
/// Points whose ReLU pre-activations come closer to zero than this are redrawn:
/// a central difference straddling the kink measures no gradient at all.
const KINK_MARGIN: f64 = 5e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: &'static str,
    pub points: usize,
    pub worst: f64,
    /// Draws rejected for lying next to a ReLU kink.
    pub redrawn: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

fn gauss(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn unit(rng: &mut Rng, n: usize) -> Vec<f64> {
    let v = gauss(rng, n);
    let s = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / s).collect()
}

/// A few random coordinates from every tensor.
fn sample_coords(store: &ParamStore, per_tensor: usize, rng: &mut Rng) -> Vec<usize> {
    let mut coords = Vec::new();
    for t in store.tensors() {
        for _ in 0..per_tensor {
            coords.push(t.offset + rng.random_range(0..t.len));
        }
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}

fn compare(analytic: &[f64], coords: &[usize], numeric: &[f64]) -> f64 {
    let a: Vec<f64> = coords.iter().map(|&c| analytic[c]).collect();
    relative_error(&a, numeric, FLOOR)
}

fn run(
    name: &'static str,
    points: usize,
    mut one: impl FnMut(usize) -> Result<f64>,
) -> Result<GradCheck> {
    let mut worst = 0.0f64;
    for p in 0..points {
        worst = worst.max(one(p)?);
    }
    Ok(GradCheck {
        name,
        points,
        worst,
        redrawn: 0,
    })
}

fn flatten(sets: &[&[Vec<f64>]]) -> Vec<f64> {
    sets.iter()
        .flat_map(|s| s.iter().flatten().copied())
        .collect()
}

fn unflatten(flat: &[f64], shapes: &[(usize, usize)]) -> Vec<Vec<Vec<f64>>> {
    let mut out = Vec::new();
    let mut at = 0;
    for &(rows, cols) in shapes {
        out.push(
            (0..rows)
                .map(|r| flat[at + r * cols..at + (r + 1) * cols].to_vec())
                .collect(),
        );
        at += rows * cols;
    }
    out
}

fn pair_check(
    rng: &mut Rng,
    f: impl Fn(&[Vec<f64>], &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
) -> Result<f64> {
    let (b, d) = (rng.random_range(2..6), rng.random_range(2..7));
    let a: Vec<Vec<f64>> = (0..b).map(|_| unit(rng, d)).collect();
    let t: Vec<Vec<f64>> = (0..b).map(|_| unit(rng, d)).collect();
    let (_, ga, gt) = f(&a, &t)?;
    let x = flatten(&[&a, &t]);
    let shapes = [(b, d), (b, d)];
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = finite_diff_grad_at(
        |v| {
            let s = unflatten(v, &shapes);
            f(&s[0], &s[1]).map(|r| r.0).unwrap_or(f64::NAN)
        },
        &x,
        EPS,
        &coords,
    )?;
    Ok(compare(&flatten(&[&ga, &gt]), &coords, &numeric))
}

fn batch_check(
    rng: &mut Rng,
    f: impl Fn(&ViewBatch) -> Result<(f64, crrg_core::cliptrain::ViewGrads)>,
) -> Result<f64> {
    let (b, d) = (rng.random_range(2..6), rng.random_range(2..7));
    let mut draw = || -> Vec<Vec<f64>> { (0..b).map(|_| unit(rng, d)).collect() };
    let batch = ViewBatch {
        img1: draw(),
        img2: draw(),
        txt1: draw(),
        txt2: draw(),
    };
    let (_, g) = f(&batch)?;
    let x = flatten(&[&batch.img1, &batch.img2, &batch.txt1, &batch.txt2]);
    let shapes = [(b, d); 4];
    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = finite_diff_grad_at(
        |v| {
            let s = unflatten(v, &shapes);
            let vb = ViewBatch {
                img1: s[0].clone(),
                img2: s[1].clone(),
                txt1: s[2].clone(),
                txt2: s[3].clone(),
            };
            f(&vb).map(|r| r.0).unwrap_or(f64::NAN)
        },
        &x,
        EPS,
        &coords,
    )?;
    Ok(compare(
        &flatten(&[&g.img1, &g.img2, &g.txt1, &g.txt2]),
        &coords,
        &numeric,
    ))
}

/// Runs every check with `points` random points each.
pub fn run_all(points: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();

    let mut rng = derived(seed, 1);
    out.push(run("bce_with_logits", points, |_| {
        let cfg = BceConfig {
            pos_weight: rng.random_range(0.5..4.0),
        };
        let z = rng.random_range(-6.0..6.0);
        let y = rng.random_bool(0.5);
        let (_, g) = bce_with_logits(z, y, &cfg);
        let n = finite_diff_grad_at(|v| bce_with_logits(v[0], y, &cfg).0, &[z], EPS, &[0])?;
        Ok(relative_error(&[g], &n, FLOOR))
    })?);

    let mut rng = derived(seed, 2);
    let mut redrawn = 0;
    let mut sel = run("selector_mlp", points, |_| {
        let (selector, x) = loop {
            let selector = SelectorMlp::new(&mut rng);
            let x = gauss(&mut rng, selector.input_dim());
            let (_, cache) = selector.net().forward_cached(&selector.params, &x);
            let pre = cache.pre_activations();
            let hidden = &pre[..pre.len() - 1];
            if hidden.iter().flatten().all(|z| z.abs() > KINK_MARGIN) {
                break (selector, x);
            }
            redrawn += 1;
        };
        let y = rng.random_bool(0.5);
        let cfg = BceConfig { pos_weight: 2.0 };
        let mut grad = selector.params.zeros_like();
        selector.loss_and_grad(&x, y, &cfg, 1.0, &mut grad)?;
        let coords = sample_coords(&selector.params, 8, &mut rng);
        let p0 = selector.params.data().to_vec();
        let mut probe = selector.clone();
        let numeric = finite_diff_grad_at(
            |v| {
                probe.params.data_mut().copy_from_slice(v);
                bce_with_logits(probe.forward(&x).unwrap_or(f64::NAN), y, &cfg).0
            },
            &p0,
            EPS,
            &coords,
        )?;
        Ok(compare(&grad, &coords, &numeric))
    })?;
    sel.redrawn = redrawn;
    out.push(sel);

    let mut rng = derived(seed, 3);
    let vocab = 24;
    let mut redrawn = 0;
    let mut lm = run("lm_loss", points, |_| {
        let cfg = DecoderConfig {
            max_len: 16,
            ..DecoderConfig::new(vocab)
        };
        let (model, feature, target) = loop {
            let model = TinyDecoder::new(cfg, &mut rng)?;
            let feature = gauss(&mut rng, REGION_FEATURE_DIM);
            let len = rng.random_range(1..10);
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..vocab)).collect();
            if model.relu_margin(&feature, &target)? > KINK_MARGIN {
                break (model, feature, target);
            }
            redrawn += 1;
        };
        let (_, grad) = lm_loss(&model, &feature, &target)?;
        let coords = sample_coords(&model.params, 4, &mut rng);
        let p0 = model.params.data().to_vec();
        let mut probe = model.clone();
        let numeric = finite_diff_grad_at(
            |v| {
                probe.params.data_mut().copy_from_slice(v);
                probe.loss(&feature, &target).unwrap_or(f64::NAN)
            },
            &p0,
            EPS,
            &coords,
        )?;
        Ok(compare(&grad, &coords, &numeric))
    })?;
    lm.redrawn = redrawn;
    out.push(lm);

    let mut rng = derived(seed, 4);
    out.push(run("icl_loss", points, |_| {
        let tau = rng.random_range(0.05..1.0);
        pair_check(&mut rng, |a, b| Ok(icl_loss(a, b, tau)?))
    })?);

    let mut rng = derived(seed, 5);
    out.push(run("tcl_loss", points, |_| {
        let margin = rng.random_range(0.1..0.5);
        pair_check(&mut rng, |a, b| Ok(tcl_loss(a, b, margin)?))
    })?);

    let mut rng = derived(seed, 6);
    out.push(run("mvs_loss", points, |_| {
        let tau = rng.random_range(0.05..1.0);
        batch_check(&mut rng, |b| Ok(mvs_loss(b, tau)?))
    })?);

    let mut rng = derived(seed, 7);
    out.push(run("combined_loss", points, |_| {
        let w = LossWeights {
            image_to_image: rng.random_range(0.0..2.0),
            text_to_text: rng.random_range(0.0..2.0),
            loss_ratio: rng.random_range(0.1..2.0),
            multi_view: rng.random_range(0.0..2.0),
            temperature: rng.random_range(0.05..1.0),
            triplet_margin: rng.random_range(0.1..0.5),
        };
        batch_check(&mut rng, |b| {
            let (l, _, g) = combined_loss(b, &w)?;
            Ok((l, g))
        })
    })?);

    let mut rng = derived(seed, 8);
    out.push(run("classifier", points, |_| {
        let dim = crrg_core::downcls::EMBED_DIM;
        let mut model = LinearClassifier::zeros(dim);
        model.set(
            &gauss(&mut rng, dim)
                .iter()
                .map(|w| w * 0.1)
                .collect::<Vec<_>>(),
            rng.sample(StandardNormal),
        );
        let n = rng.random_range(1..12);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| gauss(&mut rng, dim)).collect();
        let ys: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
        let (_, grad) = model.loss_and_grad(&xs, &ys)?;
        let p0 = model.params.data().to_vec();
        let coords: Vec<usize> = (0..p0.len()).collect();
        let mut probe = model.clone();
        let numeric = finite_diff_grad_at(
            |v| {
                probe.params.data_mut().copy_from_slice(v);
                probe
                    .loss_and_grad(&xs, &ys)
                    .map(|r| r.0)
                    .unwrap_or(f64::NAN)
            },
            &p0,
            EPS,
            &coords,
        )?;
        Ok(compare(&grad, &coords, &numeric))
    })?);

    Ok(out)
}

//! Dense building blocks with hand-written backward passes.
//!
//! Weight matrices are row-major `out × in`.

/// `y = W x + b`.
pub fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    debug_assert_eq!(w.len(), b.len() * n_in);
    b.iter()
        .zip(w.chunks_exact(n_in))
        .map(|(bias, row)| bias + dot(row, x))
        .collect()
}

/// Accumulates gradients of `y = W x + b` given `dy`.
///
/// `dx`, when supplied, is accumulated into rather than overwritten.
pub fn affine_backward(
    w: &[f64],
    x: &[f64],
    dy: &[f64],
    dw: &mut [f64],
    db: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        db[o] += g;
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for (r, &xi) in row.iter_mut().zip(x) {
            *r += g * xi;
        }
    }
    if let Some(dx) = dx {
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = &w[o * n_in..(o + 1) * n_in];
            for (d, &wi) in dx.iter_mut().zip(row) {
                *d += g * wi;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.max(0.0)).collect()
}

/// Masks `dy` in place by the rectifier's pre-activation.
pub fn relu_backward(pre: &[f64], dy: &mut [f64]) {
    for (g, &p) in dy.iter_mut().zip(pre) {
        if p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Numerically stable log-softmax.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    log_softmax(x).into_iter().map(f64::exp).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}


use crate::params::{fan_in_bound, ParamStore, TensorId};
use crate::rng::Rng;

/// Stack of affine layers with rectifiers between them (none after the last).
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    layers: Vec<(TensorId, TensorId)>,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation output of each layer.
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

impl Mlp {
    /// Registers `prefix.layer{k}.{weight,bias}` for k = 1.. with fan-in uniform init.
    pub fn register(store: &mut ParamStore, prefix: &str, dims: &[usize], rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let bound = fan_in_bound(w[0]);
                let weight = store.add_uniform(
                    format!("{prefix}.layer{}.weight", k + 1),
                    &[w[1], w[0]],
                    bound,
                    rng,
                );
                let bias =
                    store.add_uniform(format!("{prefix}.layer{}.bias", k + 1), &[w[1]], bound, rng);
                (weight, bias)
            })
            .collect();
        Self {
            dims: dims.to_vec(),
            layers,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn layer(&self, k: usize) -> (TensorId, TensorId) {
        self.layers[k]
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Vec<f64> {
        self.forward_cached(store, x).0
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = affine(store.get(w), store.get(b), &h);
            inputs.push(std::mem::take(&mut h));
            h = if k + 1 < self.layers.len() {
                relu(&z)
            } else {
                z.clone()
            };
            pre.push(z);
        }
        (h, MlpCache { inputs, pre })
    }

    /// Accumulates parameter gradients into `grad` and returns d(loss)/d(input).
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        dy: &[f64],
        grad: &mut [f64],
    ) -> Vec<f64> {
        let mut g = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k + 1 < self.layers.len() {
                relu_backward(&cache.pre[k], &mut g);
            }
            let (w, b) = self.layers[k];
            let mut dx = vec![0.0; cache.inputs[k].len()];
            let (dw, db) = store.slot_pair(grad, w, b);
            affine_backward(store.get(w), &cache.inputs[k], &g, dw, db, Some(&mut dx));
            g = dx;
        }
        g
    }
}

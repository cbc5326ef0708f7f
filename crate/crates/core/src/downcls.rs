//! Downstream linear classifier over shared-space embeddings, plus the
//! binary evaluation metrics (AUC, accuracy, F1).

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, input_err, Error, Result};
use crate::nn::{dot, sigmoid};
use crate::optimkit::{adamw_step, warmup_lr, AdamWConfig, AdamWState, WarmupSchedule};
use crate::params::{ParamStore, TensorId};
use crate::regionsel::{bce_with_logits, BceConfig};
use crate::rng::seeded;

/// Width of the shared embedding space and of the classifier input.
pub const EMBED_DIM: usize = 224;

/// `σ(w·x + b)`, weights stored under `cls.weight` / `cls.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearClassifier {
    pub params: ParamStore,
    weight: TensorId,
    bias: TensorId,
}

impl LinearClassifier {
    pub fn zeros(dim: usize) -> Self {
        let mut params = ParamStore::new();
        let weight = params.add("cls.weight", &[1, dim]);
        let bias = params.add("cls.bias", &[1]);
        Self {
            params,
            weight,
            bias,
        }
    }

    pub fn dim(&self) -> usize {
        self.params.info(self.weight).len
    }

    pub fn weights(&self) -> &[f64] {
        self.params.get(self.weight)
    }

    pub fn bias(&self) -> f64 {
        self.params.get(self.bias)[0]
    }

    pub fn set(&mut self, weights: &[f64], bias: f64) {
        self.params.get_mut(self.weight).copy_from_slice(weights);
        self.params.get_mut(self.bias)[0] = bias;
    }

    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        check_len("classifier input", self.dim(), x.len())?;
        Ok(dot(self.weights(), x) + self.bias())
    }

    /// Mean BCE over a batch and its gradient in parameter layout.
    pub fn loss_and_grad(&self, xs: &[Vec<f64>], labels: &[bool]) -> Result<(f64, Vec<f64>)> {
        let mut grad = self.params.zeros_like();
        let mut loss = 0.0;
        let bce = BceConfig::default();
        let n = xs.len().max(1) as f64;
        for (x, &y) in xs.iter().zip(labels) {
            let (l, dz) = bce_with_logits(self.logit(x)?, y, &bce);
            loss += l / n;
            for (g, xi) in self.params.slot(&mut grad, self.weight).iter_mut().zip(x) {
                *g += dz * xi / n;
            }
            self.params.slot(&mut grad, self.bias)[0] += dz / n;
        }
        Ok((loss, grad))
    }
}

pub fn predict_prob(x: &[f64], model: &LinearClassifier) -> Result<f64> {
    Ok(sigmoid(model.logit(x)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub weight_decay: f64,
    pub warmup_epochs: u32,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learn_rate: 5e-5,
            weight_decay: 1e-4,
            warmup_epochs: 1,
            seed: 0,
        }
    }
}

/// Logistic regression on frozen embeddings, zero-initialized.
pub fn train_classifier(
    embeddings: &[Vec<f64>],
    labels: &[bool],
    cfg: &ClassifierTrainConfig,
) -> Result<LinearClassifier> {
    check_len("labels", embeddings.len(), labels.len())?;
    if embeddings.is_empty() {
        return input_err("classifier training set is empty");
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return input_err("classifier training needs both classes");
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return input_err("epochs and batch size must be positive");
    }
    let dim = embeddings[0].len();
    let mut model = LinearClassifier::zeros(dim);
    let schedule = WarmupSchedule {
        warmup_epochs: cfg.warmup_epochs,
        total_epochs: cfg.epochs,
        base_lr: cfg.learn_rate,
    };
    let mut opt = AdamWConfig::new(cfg.learn_rate, cfg.weight_decay)?;
    let mut state = AdamWState::new(model.params.len());
    let mut rng = seeded(cfg.seed);
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    for epoch in 0..cfg.epochs {
        opt.learn_rate = warmup_lr(&schedule, epoch)?;
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<Vec<f64>> = batch.iter().map(|&i| embeddings[i].clone()).collect();
            let ys: Vec<bool> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grad) = model.loss_and_grad(&xs, &ys)?;
            adamw_step(model.params.data_mut(), &grad, &mut state, &opt)?;
        }
    }
    Ok(model)
}

/// Mann–Whitney AUC using average ranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len("labels", scores.len(), labels.len())?;
    if scores.iter().any(|s| s.is_nan()) {
        return input_err("scores contain NaN");
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // sum of 1-based average ranks of positives, doubled to stay integral
    let mut rank_sum_x2: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg_x2 = (i + 1 + j + 1) as u128;
        let pos_in_group = idx[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum_x2 += avg_x2 * pos_in_group;
        i = j + 1;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}

/// Fraction of items where `(score >= threshold) == label`.
pub fn accuracy(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_len("labels", scores.len(), labels.len())?;
    if scores.is_empty() {
        return input_err("accuracy of an empty set");
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(correct as f64 / scores.len() as f64)
}

/// F1 of boolean predictions against labels; 0 when there are no true positives.
pub fn f1_score(predicted: &[bool], labels: &[bool]) -> f64 {
    let tp = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p && l)
        .count() as f64;
    let fp = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| p && !l)
        .count() as f64;
    let fneg = predicted
        .iter()
        .zip(labels)
        .filter(|(&p, &l)| !p && l)
        .count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    2.0 * tp / (2.0 * tp + fp + fneg)
}

/// Writes `image_id,score,label` rows.
pub fn write_predictions_csv(path: &Path, rows: &[(String, f64, bool)]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "image_id,score,label")?;
    for (id, score, label) in rows {
        writeln!(w, "{id},{score},{}", u8::from(*label))?;
    }
    w.flush()?;
    Ok(())
}

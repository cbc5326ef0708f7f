//! Region selection: a 1024→512→128→1 rectifier network trained with
//! positively weighted binary cross-entropy on "does this region carry a
//! sentence" labels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, input_err, Result};
use crate::nn::{sigmoid, softplus, Mlp};
use crate::optimkit::{adamw_step, AdamWConfig, AdamWState, PlateauMode, PlateauScheduler};
use crate::params::ParamStore;
use crate::rng::{seeded, Rng};

pub const SELECTOR_DIMS: [usize; 4] = [1024, 512, 128, 1];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BceConfig {
    pub pos_weight: f64,
}

impl Default for BceConfig {
    fn default() -> Self {
        Self { pos_weight: 1.0 }
    }
}

/// Weighted BCE on a logit and its derivative with respect to the logit.
///
/// `loss = pos_weight·y·softplus(−z) + (1−y)·softplus(z)`.
pub fn bce_with_logits(logit: f64, label: bool, cfg: &BceConfig) -> (f64, f64) {
    if label {
        (
            cfg.pos_weight * softplus(-logit),
            cfg.pos_weight * (sigmoid(logit) - 1.0),
        )
    } else {
        (softplus(logit), sigmoid(logit))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectorMlp {
    pub params: ParamStore,
    net: Mlp,
}

impl SelectorMlp {
    pub fn new(rng: &mut Rng) -> Self {
        Self::with_dims(&SELECTOR_DIMS, rng)
    }

    /// Same architecture at other widths; the last width must be 1.
    pub fn with_dims(dims: &[usize], rng: &mut Rng) -> Self {
        assert_eq!(dims.last(), Some(&1), "selector emits a single logit");
        let mut params = ParamStore::new();
        let net = Mlp::register(&mut params, "selector", dims, rng);
        Self { params, net }
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn forward(&self, features: &[f64]) -> Result<f64> {
        check_len("selector input", self.input_dim(), features.len())?;
        Ok(self.net.forward(&self.params, features)[0])
    }

    /// Logit > 0 selects the region.
    pub fn select(&self, features: &[f64]) -> Result<bool> {
        Ok(self.forward(features)? > 0.0)
    }

    /// Loss on one example with gradients accumulated into `grad` (scaled by `scale`).
    pub fn loss_and_grad(
        &self,
        features: &[f64],
        label: bool,
        cfg: &BceConfig,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        check_len("selector input", self.input_dim(), features.len())?;
        let (out, cache) = self.net.forward_cached(&self.params, features);
        let (loss, dz) = bce_with_logits(out[0], label, cfg);
        self.net.backward(&self.params, &cache, &[dz * scale], grad);
        Ok(loss)
    }

    pub fn mean_loss(&self, data: &[(Vec<f64>, bool)], cfg: &BceConfig) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data {
            total += bce_with_logits(self.forward(x)?, *y, cfg).0;
        }
        Ok(total / data.len().max(1) as f64)
    }
}

pub fn selector_forward(features: &[f64], model: &SelectorMlp) -> Result<f64> {
    model.forward(features)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorTrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learn_rate: f64,
    pub weight_decay: f64,
    pub scheduler_factor: f64,
    pub scheduler_cooldown: u32,
    pub scheduler_patience: u32,
    pub bce: BceConfig,
    pub seed: u64,
}

impl Default for SelectorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            learn_rate: 5e-5,
            weight_decay: 0.0,
            scheduler_factor: 0.5,
            scheduler_cooldown: 5,
            scheduler_patience: 5,
            bce: BceConfig { pos_weight: 2.0 },
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Mini-batch training with AdamW and a plateau scheduler on validation loss.
///
/// Returns the parameters from the epoch with the lowest validation loss.
/// When `val` is empty the training loss is monitored instead.
pub fn train_selector(
    train: &[(Vec<f64>, bool)],
    val: &[(Vec<f64>, bool)],
    cfg: &SelectorTrainConfig,
) -> Result<(SelectorMlp, Vec<EpochLog>)> {
    train_selector_with_dims(train, val, cfg, &SELECTOR_DIMS)
}

pub fn train_selector_with_dims(
    train: &[(Vec<f64>, bool)],
    val: &[(Vec<f64>, bool)],
    cfg: &SelectorTrainConfig,
    dims: &[usize],
) -> Result<(SelectorMlp, Vec<EpochLog>)> {
    if train.is_empty() {
        return input_err("selector training set is empty");
    }
    if cfg.batch_size == 0 {
        return input_err("batch size must be positive");
    }
    let mut rng = seeded(cfg.seed);
    let mut model = SelectorMlp::with_dims(dims, &mut rng);
    for (x, _) in train.iter().chain(val) {
        check_len("selector input", model.input_dim(), x.len())?;
    }
    let mut opt = AdamWConfig::new(cfg.learn_rate, cfg.weight_decay)?;
    let mut state = AdamWState::new(model.params.len());
    let mut sched = PlateauScheduler::new(
        cfg.learn_rate,
        cfg.scheduler_factor,
        cfg.scheduler_patience,
        cfg.scheduler_cooldown,
        PlateauMode::Min,
    )?;
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::new();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = model.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (x, y) = &train[i];
                train_loss += model.loss_and_grad(x, *y, &cfg.bce, scale, &mut grad)?;
            }
            adamw_step(model.params.data_mut(), &grad, &mut state, &opt)?;
        }
        train_loss /= train.len() as f64;
        let val_loss = if val.is_empty() {
            model.mean_loss(train, &cfg.bce)?
        } else {
            model.mean_loss(val, &cfg.bce)?
        };
        logs.push(EpochLog {
            epoch,
            lr: opt.learn_rate,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params.clone()));
        }
        opt.learn_rate = sched.step(val_loss)?;
    }
    if let Some((_, p)) = best {
        model.params = p;
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TensorId;

    #[test]
    fn bce_examples() {
        let one = BceConfig { pos_weight: 1.0 };
        let two = BceConfig { pos_weight: 2.0 };
        assert!((bce_with_logits(0.0, true, &one).0 - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce_with_logits(0.0, true, &two).0 - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bce_with_logits(30.0, true, &one).0 < 1e-12);
        let (l, g) = bce_with_logits(-800.0, true, &one);
        assert!(l.is_finite() && (g + 1.0).abs() < 1e-12);
    }

    #[test]
    fn pos_weight_affects_only_positives() {
        let one = BceConfig { pos_weight: 1.0 };
        let two = BceConfig { pos_weight: 2.0 };
        for z in [-3.0, -0.5, 0.0, 2.0] {
            assert!(bce_with_logits(z, true, &two).0 > bce_with_logits(z, true, &one).0);
            assert_eq!(
                bce_with_logits(z, false, &two),
                bce_with_logits(z, false, &one)
            );
        }
    }

    #[test]
    fn zero_model_gives_zero_logit() {
        let mut m = SelectorMlp::new(&mut seeded(0));
        m.params.data_mut().iter_mut().for_each(|v| *v = 0.0);
        assert_eq!(m.forward(&vec![0.7; 1024]).unwrap(), 0.0);
        assert!(m.forward(&[0.0; 3]).is_err());
    }

    #[test]
    fn width_reduced_hand_arithmetic() {
        // 2 -> 2 -> 2 -> 1 clone of the code path with hand-set weights
        let mut m = SelectorMlp::with_dims(&[2, 2, 2, 1], &mut seeded(0));
        let set = |m: &mut SelectorMlp, name: &str, v: &[f64]| {
            let id: TensorId = m.params.id(name).unwrap();
            m.params.get_mut(id).copy_from_slice(v);
        };
        set(&mut m, "selector.layer1.weight", &[1.0, 0.0, 0.0, 1.0]);
        set(&mut m, "selector.layer1.bias", &[0.0, -5.0]);
        set(&mut m, "selector.layer2.weight", &[2.0, 0.0, 0.0, 1.0]);
        set(&mut m, "selector.layer2.bias", &[1.0, 0.0]);
        set(&mut m, "selector.layer3.weight", &[3.0, 7.0]);
        set(&mut m, "selector.layer3.bias", &[-0.5]);
        // h1 = relu([1.5, 2 - 5]) = [1.5, 0]; h2 = relu([4, 0]) ; out = 12 - 0.5
        assert_eq!(m.forward(&[1.5, 2.0]).unwrap(), 11.5);
        let again = m.forward(&[1.5, 2.0]).unwrap();
        assert_eq!(again, 11.5);
    }

    #[test]
    fn empty_training_set_rejected() {
        assert!(train_selector(&[], &[], &SelectorTrainConfig::default()).is_err());
    }
}

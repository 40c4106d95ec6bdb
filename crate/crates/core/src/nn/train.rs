use serde::{Deserialize, Serialize};

use super::backprop::{loss_and_grads, Gradients, Reduction};
use super::ModelState;
use crate::data::{batch_iterator, ImageRecord};
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{lit, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    /// Recipe used to train the original model: SGD, lr 0.01, momentum 0.9.
    pub fn original() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
        }
    }

    /// Fine-tuning recipe: batch 64, lr 0.001, momentum 0.9, 10 epochs.
    pub fn finetune() -> Self {
        Self {
            learning_rate: 0.001,
            ..Self::original()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        Ok(())
    }

    /// Shuffle seed for one epoch.
    pub fn epoch_seed(&self, epoch: usize) -> u64 {
        seed::derive(seed::derive(self.seed, seed::streams::SHUFFLE), epoch as u64)
    }
}

/// Which parameterised layers receive updates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Trainable {
    All,
    None,
    /// The last `k` parameterised layers, counted back from the output.
    LastK(usize),
    /// Explicit per-layer flags aligned with `ModelState::layers`.
    Layers(Vec<bool>),
}

impl Trainable {
    pub fn includes(&self, layer: usize, n_layers: usize) -> bool {
        match self {
            Trainable::All => true,
            Trainable::None => false,
            Trainable::LastK(k) => layer + k >= n_layers,
            Trainable::Layers(flags) => flags.get(layer).copied().unwrap_or(false),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// SGD with heavy-ball momentum: `v = mu * v + g; p -= lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<S: Scalar = f32> {
    lr: S,
    momentum: S,
    trainable: Trainable,
    velocity: Vec<Option<(Vec<S>, Vec<S>)>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(cfg: &TrainConfig, trainable: Trainable, model: &ModelState<S>) -> Self {
        Self {
            lr: lit(cfg.learning_rate),
            momentum: lit(cfg.momentum),
            velocity: vec![None; model.layers.len()],
            trainable,
        }
    }

    pub fn step(&mut self, model: &mut ModelState<S>, grads: &Gradients<S>) {
        let n = model.layers.len();
        for (li, (layer, g)) in model.layers.iter_mut().zip(&grads.layers).enumerate() {
            if !self.trainable.includes(li, n) {
                continue;
            }
            let (vw, vb) = self.velocity[li]
                .get_or_insert_with(|| (vec![S::zero(); layer.weight.len()], vec![S::zero(); layer.bias.len()]));
            for (params, vel, grad) in [
                (layer.weight.data_mut(), vw, g.weight.data()),
                (layer.bias.data_mut(), vb, g.bias.data()),
            ] {
                for ((p, v), &gr) in params.iter_mut().zip(vel.iter_mut()).zip(grad) {
                    *v = self.momentum * *v + gr;
                    *p -= self.lr * *v;
                }
            }
        }
    }
}

/// Mini-batch SGD on `data`, reshuffled each epoch with a seed derived from
/// `cfg.seed`. Layers excluded by `trainable` are never written.
pub fn sgd_train(
    model: &ModelState,
    data: &[ImageRecord],
    cfg: &TrainConfig,
    trainable: &Trainable,
) -> Result<(ModelState, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    let mut model = model.clone();
    let mut opt = Sgd::new(cfg, trainable.clone(), &model);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in batch_iterator(data, cfg.batch_size, Some(cfg.epoch_seed(epoch)))? {
            let out = loss_and_grads(&model, &batch.images, &batch.labels, Reduction::Mean, true, false)?;
            loss_sum += out.mean_loss * batch.labels.len() as f64;
            correct += out.correct;
            opt.step(&mut model, out.params.as_ref().expect("requested"));
        }
        if !model.all_finite() {
            return Err(Error::config(format!(
                "training diverged in epoch {epoch}; lower the learning rate"
            )));
        }
        logs.push(EpochLog {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn last_k_counts_from_output() {
        let t = Trainable::LastK(3);
        let flags: Vec<bool> = (0..6).map(|i| t.includes(i, 6)).collect();
        assert_eq!(flags, vec![false, false, false, true, true, true]);
        assert!((0..6).all(|i| Trainable::LastK(6).includes(i, 6)));
        assert!((0..6).all(|i| !Trainable::None.includes(i, 6)));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::finetune().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::finetune();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.learning_rate = 0.0));
        assert!(bad(|c| c.momentum = 1.0));
        assert!(bad(|c| c.momentum = -0.1));
        assert!(bad(|c| c.batch_size = 0));
    }
}

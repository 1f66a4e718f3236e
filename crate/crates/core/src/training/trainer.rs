use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::augment::{augment, AugmentConfig};
use super::loss::dice_score;
use crate::data::{stack, Dataset};
use crate::error::{invalid, Error, Result};
use crate::nets::Network;
use crate::tensor::{ops, Graph, Mode, Precision, Tensor};

/// Settings for one training run. Field names also accept camelCase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(alias = "learningRate")]
    pub learning_rate: f64,
    #[serde(alias = "batchSize")]
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(alias = "dropoutP")]
    pub dropout_p: f64,
    pub augment: AugmentConfig,
    pub seed: u64,
    #[serde(alias = "diceEpsilon")]
    pub dice_epsilon: f64,
    /// Stop after this many epochs without a new best validation loss.
    pub patience: Option<usize>,
    pub precision: Precision,
    /// Where the best checkpoint is written whenever it improves.
    #[serde(alias = "checkpointDir")]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 50,
            dropout_p: 0.5,
            augment: AugmentConfig::default(),
            seed: 0,
            dice_epsilon: 1e-5,
            patience: None,
            precision: Precision::Fast,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(invalid!("dropout probability must lie in [0, 1), got {}", self.dropout_p));
        }
        if !(self.dice_epsilon >= 0.0) {
            return Err(invalid!("dice epsilon must be non-negative"));
        }
        self.augment.validate()
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: TrainConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_dice: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss (first on ties).
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.get(self.best_epoch)
    }

    /// CSV with header `epoch,train_loss,val_loss,val_dice`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.epochs {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let epochs = r.deserialize().collect::<Result<Vec<EpochRecord>, _>>()?;
        let best_epoch = argmin(epochs.iter().map(|e| e.val_loss));
        Ok(TrainHistory { epochs, best_epoch })
    }
}

fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

pub struct TrainOutcome {
    /// Network from the epoch with the lowest validation loss.
    pub best: Network,
    pub history: TrainHistory,
}

/// Eval-mode metrics over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Soft Dice loss with sums pooled over every sample.
    pub loss: f64,
    /// Mean of per-sample hard Dice scores.
    pub dice: f64,
    pub per_sample_dice: Vec<f64>,
}

/// Runs `net` in eval mode over `data` in chunks of `batch_size`.
pub fn evaluate(net: &Network, data: &Dataset, eps: f64, batch_size: usize, precision: Precision) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(invalid!("cannot evaluate on an empty dataset"));
    }
    let (mut num, mut den) = (0.0, 0.0);
    let mut per_sample_dice = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = data.batch(chunk)?;
        let pred = net.predict(&x, precision)?;
        let (n, d) = ops::soft_dice_terms(&pred, &y, 0.0)?;
        num += n;
        den += d;
        let per = pred.numel() / chunk.len();
        for b in 0..chunk.len() {
            let p = Tensor::new(vec![per], pred.data()[b * per..(b + 1) * per].to_vec())?;
            let g = Tensor::new(vec![per], y.data()[b * per..(b + 1) * per].to_vec())?;
            per_sample_dice.push(dice_score(&p, &g)?);
        }
    }
    Ok(Evaluation {
        loss: 1.0 - (num + eps) / (den + eps),
        dice: per_sample_dice.iter().sum::<f64>() / per_sample_dice.len() as f64,
        per_sample_dice,
    })
}

fn diverged(epoch: usize, step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(msg) => Error::Divergence(format!("epoch {epoch}, step {step}: {msg}")),
        other => other,
    }
}

/// Trains a copy of `net` and returns the best-validation-loss network.
pub fn train(net: &Network, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(net, train_set, val_set, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every epoch.
///
/// Batch order, augmentation and dropout are all drawn from one seeded
/// stream, so the outcome does not depend on the thread count.
pub fn train_with(
    net: &Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(invalid!("training and validation sets must be non-empty"));
    }
    let mut net = net.clone();
    net.set_dropout(cfg.dropout_p)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(net.parameters());
    let mut history = TrainHistory::default();
    let mut best = net.clone();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, batch) in batches.iter().enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let pairs = batch
                .par_iter()
                .zip(seeds)
                .map(|(&i, s)| {
                    let mut r = ChaCha8Rng::seed_from_u64(s);
                    augment(&train_set.images[i], &train_set.masks[i], &cfg.augment, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            let x = stack(pairs.iter().map(|p| &p.0), pairs.len())?;
            let y = stack(pairs.iter().map(|p| &p.1), pairs.len())?;

            let mut g = Graph::with_precision(cfg.precision);
            let xi = g.constant(x);
            let yi = g.constant(y);
            let fwd = net.forward(&mut g, xi, Mode::Train, &mut rng).map_err(|e| diverged(epoch, step, e))?;
            let loss = g.soft_dice(fwd.output, yi, cfg.dice_epsilon).map_err(|e| diverged(epoch, step, e))?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch}, step {step}: loss is {value}")));
            }
            let grads = g.backward(loss).map_err(|e| diverged(epoch, step, e))?.params();
            adam_step(&mut net.parameters_mut(), &grads, &mut adam, cfg.learning_rate)
                .map_err(|e| diverged(epoch, step, e))?;
            net.apply_batch_stats(&fwd.batch_stats)?;
            loss_sum += value;
        }

        let eval = evaluate(&net, val_set, cfg.dice_epsilon, cfg.batch_size, cfg.precision)?;
        if !eval.loss.is_finite() {
            return Err(Error::Divergence(format!("epoch {epoch}: validation loss is {}", eval.loss)));
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches.len() as f64,
            val_loss: eval.loss,
            val_dice: eval.dice,
        };
        let improved = history.epochs.is_empty() || record.val_loss < history.epochs[history.best_epoch].val_loss;
        history.epochs.push(record);
        if improved {
            history.best_epoch = epoch;
            best = net.clone();
            if let Some(dir) = &cfg.checkpoint_dir {
                best.save(dir)?;
            }
        }
        on_epoch(&history.epochs[epoch]);
        if let Some(p) = cfg.patience {
            if epoch - history.best_epoch >= p {
                break;
            }
        }
    }
    Ok(TrainOutcome { best, history })
}

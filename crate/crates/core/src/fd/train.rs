use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{argmax, one_hot, FdDataset, FdModel, FdSample};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, LstmParams, Optimizer, OptimizerConfig, ParamSet};
use crate::sim::STATE_DIM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FdTrainConfig {
    pub epochs: usize,
    pub minibatch_size: usize,
    /// Fraction of runs (not windows) held out for evaluation.
    pub holdout_fraction: f64,
    /// Overrides the stage's default optimizer.
    pub optimizer: Option<OptimizerConfig>,
}

impl Default for FdTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            minibatch_size: 32,
            holdout_fraction: 0.2,
            optimizer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the epoch's minibatches.
    pub loss: f64,
    /// Accuracies of the weights at the end of the epoch.
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdTrainReport {
    pub train_runs: Vec<u32>,
    pub heldout_runs: Vec<u32>,
    pub train_windows: usize,
    pub heldout_windows: usize,
    pub history: Vec<FdEpochStats>,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Fraction of samples whose argmax class matches the label. NaN when empty.
pub fn fd_accuracy(model: &FdModel, samples: &[&FdSample]) -> Result<f64> {
    let hits = samples
        .par_iter()
        .map(|s| Ok((argmax(&model.params.forward(&s.window)?) == s.label) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / samples.len() as f64)
}

/// Per-channel mean and standard deviation over every step of `samples`.
fn channel_stats(samples: &[&FdSample]) -> ([f64; STATE_DIM], [f64; STATE_DIM]) {
    let mut mean = [0.0; STATE_DIM];
    let mut sq = [0.0; STATE_DIM];
    let mut n = 0.0;
    for s in samples {
        for step in s.window.chunks_exact(STATE_DIM) {
            for (j, v) in step.iter().enumerate() {
                mean[j] += v;
                sq[j] += v * v;
            }
            n += 1.0;
        }
    }
    let mut std = [1.0; STATE_DIM];
    for j in 0..STATE_DIM {
        mean[j] /= n;
        let var = sq[j] / n - mean[j] * mean[j];
        if var > 1e-12 {
            std[j] = var.sqrt();
        }
    }
    (mean, std)
}

/// Rewrites first-layer input weights so that the network applied to raw
/// states equals `params` applied to standardized ones.
fn fold_standardization(params: &LstmParams, mean: &[f64; STATE_DIM], std: &[f64; STATE_DIM]) -> LstmParams {
    let mut out = params.clone();
    let layer = &mut out.layers[0];
    let width = layer.n_in + layer.n_hidden;
    for r in 0..4 * layer.n_hidden {
        let row = &mut layer.weight[r * width..r * width + layer.n_in];
        let mut shift = 0.0;
        for j in 0..STATE_DIM {
            row[j] /= std[j];
            shift += row[j] * mean[j];
        }
        layer.bias[r] -= shift;
    }
    out
}

/// Trains a detector for the dataset's stage with softmax cross-entropy,
/// holding out whole runs so that overlapping windows never leak. Inputs are
/// standardized per channel during training and the scaling is folded into
/// the returned weights, which therefore take raw states.
pub fn train_fd(dataset: &FdDataset, cfg: &FdTrainConfig, seed: u64) -> Result<(FdModel, FdTrainReport)> {
    if dataset.samples.is_empty() {
        return Err(Error::InvalidParameter("empty dataset".into()));
    }
    if cfg.minibatch_size == 0 || !(0.0..1.0).contains(&cfg.holdout_fraction) {
        return Err(Error::InvalidParameter("bad detector training settings".into()));
    }
    dataset.validate()?;
    let stage = dataset.stage;
    let classes = stage.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut runs: Vec<u32> = dataset.samples.iter().map(|s| s.run).collect();
    runs.sort_unstable();
    runs.dedup();
    runs.shuffle(&mut rng);
    let mut n_hold = (cfg.holdout_fraction * runs.len() as f64).round() as usize;
    if cfg.holdout_fraction > 0.0 && runs.len() > 1 {
        n_hold = n_hold.clamp(1, runs.len() - 1);
    }
    let mut heldout_runs = runs[..n_hold].to_vec();
    let mut train_runs = runs[n_hold..].to_vec();
    heldout_runs.sort_unstable();
    train_runs.sort_unstable();

    let (train, heldout): (Vec<&FdSample>, Vec<&FdSample>) = dataset
        .samples
        .iter()
        .partition(|s| train_runs.binary_search(&s.run).is_ok());
    let labels: Vec<Vec<f64>> = (0..classes).map(|c| one_hot(c, classes)).collect::<Result<_>>()?;

    let (mean, std) = channel_stats(&train);
    let scaled: Vec<Vec<f64>> = train
        .iter()
        .map(|s| {
            s.window
                .iter()
                .enumerate()
                .map(|(i, v)| (v - mean[i % STATE_DIM]) / std[i % STATE_DIM])
                .collect()
        })
        .collect();

    let mut model = FdModel::init(stage, &mut rng);
    let mut raw = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer.unwrap_or_else(|| stage.default_optimizer()));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let evaluate = |m: &FdModel, set: &[&FdSample]| -> Result<f64> {
        if set.is_empty() {
            Ok(f64::NAN)
        } else {
            fd_accuracy(m, set)
        }
    };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.minibatch_size) {
            let mut grads = model.params.zeros_like();
            let scale = 1.0 / chunk.len() as f64;
            for &i in chunk {
                let cache = model.params.forward_cached(&scaled[i])?;
                let (loss, mut dl) = softmax_cross_entropy(&cache.logits, &labels[train[i].label]);
                total += loss;
                dl.iter_mut().for_each(|g| *g *= scale);
                model.params.backward(&cache, &dl, &mut grads);
            }
            opt.step(&mut model.params, &grads)?;
        }
        raw.params = fold_standardization(&model.params, &mean, &std);
        history.push(FdEpochStats {
            epoch,
            loss: total / train.len() as f64,
            train_accuracy: evaluate(&raw, &train)?,
            heldout_accuracy: evaluate(&raw, &heldout)?,
        });
    }

    raw.params = fold_standardization(&model.params, &mean, &std);
    let (train_accuracy, heldout_accuracy) = match history.last() {
        Some(h) => (h.train_accuracy, h.heldout_accuracy),
        None => (evaluate(&raw, &train)?, evaluate(&raw, &heldout)?),
    };
    let report = FdTrainReport {
        train_windows: train.len(),
        heldout_windows: heldout.len(),
        train_runs,
        heldout_runs,
        history,
        train_accuracy,
        heldout_accuracy,
    };
    Ok((raw, report))
}

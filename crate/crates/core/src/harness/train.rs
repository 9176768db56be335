//! Minibatch training with per-epoch evaluation and best-validation selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optimize::{Optimizer, OptimizerConfig};
use crate::tensor::Tensor;

fn default_true() -> bool {
    true
}

fn default_eval_batch() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default)]
    pub early_stop_patience: Option<usize>,
    /// Leave the model holding the best-validation weights rather than the last ones.
    #[serde(default = "default_true")]
    pub keep_best: bool,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn adam(epochs: usize, batch_size: usize, lr: f64, weight_decay: f64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            optimizer: OptimizerConfig::adam(lr, weight_decay),
            early_stop_patience: None,
            keep_best: true,
            eval_batch: default_eval_batch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.optimizer.lr >= 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::config("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Accuracies are percentages in `[0, 100]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose weights the model holds on return.
    pub selected_epoch: usize,
}

impl TrainOutcome {
    pub fn selected(&self) -> Option<&EpochMetrics> {
        self.epochs.iter().find(|e| e.epoch == self.selected_epoch)
    }

    /// Test accuracy of the selected epoch.
    pub fn test_accuracy(&self) -> Option<f64> {
        self.selected().and_then(|e| e.test_accuracy)
    }
}

/// Which splits to use and the fixed context vector, if the model is dendritic.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a LabeledSet,
    pub val: Option<&'a LabeledSet>,
    pub test: Option<&'a LabeledSet>,
    pub context: Option<&'a Tensor>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Percentage of `set` classified correctly.
pub fn evaluate(model: &Model, set: &LabeledSet, context: Option<&Tensor>, batch: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::data("cannot evaluate on an empty set"));
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < set.len() {
        let end = (start + batch.max(1)).min(set.len());
        let x = set.inputs.slice_rows(start, end);
        let predictions = model.predict(&x, context)?;
        correct += predictions
            .iter()
            .zip(&set.labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(100.0 * correct as f64 / set.len() as f64)
}

/// One pass of shuffled minibatch updates; returns mean loss and accuracy.
pub fn train_epoch(
    model: &mut Model,
    optimizer: &mut Optimizer,
    set: &LabeledSet,
    context: Option<&Tensor>,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in order.chunks(batch_size) {
        let (x, labels) = set.batch(chunk);
        model.zero_grad();
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &x, context, true)?;
        let loss = g.softmax_xent(pass.logits, &labels)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteGradient("loss".into()));
        }
        loss_sum += value * chunk.len() as f64;
        let logits = g.value(pass.logits);
        let classes = logits.shape()[1];
        correct += logits
            .data()
            .chunks(classes)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        g.backward(loss)?;
        model.accumulate_grads(&g, &pass)?;
        optimizer.step(model.params_mut())?;
    }
    let n = set.len() as f64;
    Ok((loss_sum / n, 100.0 * correct as f64 / n))
}

/// Train for `cfg.epochs` epochs (fewer with early stopping).
///
/// After each epoch the validation and test splits are scored and `on_epoch`
/// is called, so a caller can persist progress. With a validation split and
/// `keep_best`, the model ends on the weights of the best validation epoch
/// (earliest on ties); otherwise on the last epoch's weights.
pub fn train(
    model: &mut Model,
    optimizer: &mut Optimizer,
    data: TrainData<'_>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochMetrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Vec<Tensor>)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.epochs {
        let (train_loss, train_accuracy) =
            train_epoch(model, optimizer, data.train, data.context, cfg.batch_size, &mut rng)?;
        let val_accuracy = data
            .val
            .map(|v| evaluate(model, v, data.context, cfg.eval_batch))
            .transpose()?;
        let test_accuracy = data
            .test
            .map(|t| evaluate(model, t, data.context, cfg.eval_batch))
            .transpose()?;
        let metrics = EpochMetrics {
            epoch,
            train_loss,
            train_accuracy,
            val_accuracy,
            test_accuracy,
        };
        on_epoch(&metrics)?;
        epochs.push(metrics);
        if let Some(v) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| v > *b) {
                best = Some((v, epoch, if cfg.keep_best { model.values() } else { Vec::new() }));
                since_best = 0;
            } else {
                since_best += 1;
            }
            if cfg.early_stop_patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
    }
    let last = epochs.last().map_or(0, |e| e.epoch);
    let selected_epoch = match best {
        Some((_, epoch, values)) if cfg.keep_best => {
            model.load_values(&values)?;
            epoch
        }
        _ => last,
    };
    Ok(TrainOutcome { epochs, selected_epoch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::toy_blobs;
    use crate::nn::{ArchitectureSpec, PresetOptions};

    fn setup(seed: u64) -> (Model, LabeledSet, LabeledSet) {
        let spec = ArchitectureSpec::fc("toy", &[1, 1, 16], &[32], 4, &PresetOptions::default());
        (
            Model::build(&spec, seed).unwrap(),
            toy_blobs(400, 4, 1).unwrap(),
            toy_blobs(200, 4, 2).unwrap(),
        )
    }

    #[test]
    fn toy_reaches_high_accuracy_and_counts_epochs() {
        let (mut model, train_set, test) = setup(0);
        let cfg = TrainConfig::adam(5, 20, 1e-2, 0.0);
        let mut opt = Optimizer::new(cfg.optimizer.clone());
        let mut seen = 0;
        let out = train(
            &mut model,
            &mut opt,
            TrainData { train: &train_set, val: None, test: Some(&test), context: None },
            &cfg,
            9,
            &mut |_| {
                seen += 1;
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(out.epochs.len(), 5);
        assert_eq!(seen, 5);
        assert_eq!(out.selected_epoch, 4);
        assert!(out.test_accuracy().unwrap() >= 99.0);
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = || {
            let (mut model, train_set, test) = setup(3);
            let cfg = TrainConfig::adam(2, 16, 1e-2, 1e-4);
            let mut opt = Optimizer::new(cfg.optimizer.clone());
            let data = TrainData { train: &train_set, val: Some(&test), test: Some(&test), context: None };
            let out = train(&mut model, &mut opt, data, &cfg, 5, &mut |_| Ok(())).unwrap();
            (out, model.values())
        };
        let (a, va) = run();
        let (b, vb) = run();
        assert_eq!(a, b);
        assert!(va.iter().zip(&vb).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn early_stop_and_best_restore() {
        let (mut model, train_set, test) = setup(4);
        let mut cfg = TrainConfig::adam(50, 40, 0.0, 0.0);
        cfg.early_stop_patience = Some(2);
        let mut opt = Optimizer::new(cfg.optimizer.clone());
        let data = TrainData { train: &train_set, val: Some(&test), test: None, context: None };
        let out = train(&mut model, &mut opt, data, &cfg, 0, &mut |_| Ok(())).unwrap();
        // lr = 0 never improves on epoch 0
        assert_eq!(out.epochs.len(), 3);
        assert_eq!(out.selected_epoch, 0);
    }
}

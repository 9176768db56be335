//! Labeled image sets, file loaders, task streams, and noise injection.

mod cifar;
mod idx;
mod noise;
mod tasks;
mod toy;

pub use cifar::{load_cifar, parse_cifar, CifarVariant};
pub use idx::{load_mnist, parse_idx_images, parse_idx_labels};
pub use noise::{inject_noise, NoiseMode};
pub use tasks::{permuted_mnist, split_cifar100, Permutation, Subset, Task, TaskStream, TaskTransform};
pub use toy::toy_blobs;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images `[N×C×H×W]` with integer labels and the per-channel statistics used
/// to normalize them.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Per-channel mean of the raw `[0,1]` pixels of the training split.
    pub mean: Vec<f64>,
    /// Per-channel standard deviation of the raw `[0,1]` pixels of the training split.
    pub std: Vec<f64>,
}

impl LabeledSet {
    /// Wrap already-prepared inputs; statistics are recorded as the identity transform.
    pub fn from_raw(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let shape = inputs.shape();
        if shape.len() != 4 {
            return Err(Error::data(format!("inputs must be [N×C×H×W], got {shape:?}")));
        }
        if shape[0] != labels.len() {
            return Err(Error::data(format!(
                "{} inputs but {} labels",
                shape[0],
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::data(format!("label {bad} out of range for {classes} classes")));
        }
        let channels = shape[1];
        Ok(LabeledSet {
            inputs,
            labels,
            classes,
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Per-sample shape `[C, H, W]`.
    pub fn sample_shape(&self) -> Vec<usize> {
        self.inputs.shape()[1..].to_vec()
    }

    /// Samples at `indices`, in order.
    pub fn select(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            inputs: self.inputs.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }

    /// Batch tensors for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.inputs.gather_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Seeded split into `(rest, held_out)` with `held_out` of size `n`.
    pub fn split_holdout(&self, n: usize, seed: u64) -> Result<(LabeledSet, LabeledSet)> {
        if n > self.len() {
            return Err(Error::config(format!("cannot hold out {n} of {} samples", self.len())));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (held, rest) = order.split_at(n);
        Ok((self.select(rest), self.select(held)))
    }

    /// Per-channel mean and (population) standard deviation of the inputs.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        channel_stats(&self.inputs)
    }
}

pub(crate) fn channel_stats(inputs: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = inputs.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    let data = inputs.data();
    for ch in 0..c {
        let mut total = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            total += data[base..base + plane].iter().sum::<f64>();
        }
        let m = total / (n * plane) as f64;
        let mut sq = 0.0;
        for i in 0..n {
            let base = (i * c + ch) * plane;
            sq += data[base..base + plane].iter().map(|v| (v - m) * (v - m)).sum::<f64>();
        }
        mean[ch] = m;
        var[ch] = sq / (n * plane) as f64;
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

/// Standardize both splits per channel with statistics of `train`.
pub fn normalize_pair(mut train: LabeledSet, mut test: LabeledSet) -> Result<(LabeledSet, LabeledSet)> {
    if train.sample_shape() != test.sample_shape() {
        return Err(Error::data("train and test image shapes differ"));
    }
    let (mean, std) = train.channel_stats();
    if std.iter().any(|&s| s == 0.0) {
        return Err(Error::data("a channel has zero variance; cannot standardize"));
    }
    for set in [&mut train, &mut test] {
        let s = set.inputs.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        for (i, v) in set.inputs.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - mean[ch]) / std[ch];
        }
        set.mean = mean.clone();
        set.std = std.clone();
    }
    Ok((train, test))
}

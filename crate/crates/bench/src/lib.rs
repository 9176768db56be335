//! Shared fixtures for the kernel benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsenet_core::{LabeledSet, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform tensor in `[-1, 1)`.
pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut rng(seed))
}

/// A batch of MNIST-shaped inputs with cycling labels.
pub fn mnist_like(n: usize, seed: u64) -> LabeledSet {
    let labels = (0..n).map(|i| i % 10).collect();
    LabeledSet::from_raw(random(&[n, 1, 28, 28], seed).map(|v| 0.5 * (v + 1.0)), labels, 10)
        .expect("shapes agree")
}

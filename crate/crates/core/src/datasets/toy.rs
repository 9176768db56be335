//! Small separable dataset for fast tests.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TOY_DIM: usize = 16;
const SPACING: f64 = 3.0;
const CLIP: f64 = 1.45;

/// `n` points of shape `[1×1×16]`; class `c` is centered at `3·e_c` with
/// unit Gaussian noise truncated to ±1.45 per coordinate, so the probe
/// `w_c = e_c` separates every class with margin 0.1. Sample `i` has label `i % classes`.
pub fn toy_blobs(n: usize, classes: usize, seed: u64) -> Result<LabeledSet> {
    if classes < 2 || classes > TOY_DIM {
        return Err(Error::config(format!("toy_blobs supports 2..={TOY_DIM} classes, got {classes}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * TOY_DIM);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &label in &labels {
        for d in 0..TOY_DIM {
            let z = loop {
                let z: f64 = StandardNormal.sample(&mut rng);
                if z.abs() <= CLIP {
                    break z;
                }
            };
            data.push(if d == label { SPACING + z } else { z });
        }
    }
    LabeledSet::from_raw(Tensor::from_vec(vec![n, 1, 1, TOY_DIM], data)?, labels, classes)
}

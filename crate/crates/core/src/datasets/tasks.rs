//! Sequential task streams: pixel-permuted MNIST and class-split CIFAR-100.
//!
//! Tasks keep a shared handle to the base split and materialize their
//! transformed copy on demand, so a ten-task stream costs one dataset in memory.

use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A bijection on pixel positions; `apply` computes `out[j] = in[π[j]]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::config("permutation is not a bijection"));
            }
            seen[i] = true;
        }
        Ok(Permutation(order))
    }

    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        Permutation(order)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (j, &i) in self.0.iter().enumerate() {
            inv[i] = j;
        }
        Permutation(inv)
    }

    /// Permute the spatial positions of every channel of every image.
    pub fn apply(&self, inputs: &Tensor) -> Result<Tensor> {
        let s = inputs.shape();
        let plane = s[2] * s[3];
        if plane != self.0.len() {
            return Err(Error::config(format!(
                "permutation over {} positions applied to {}×{} images",
                self.0.len(),
                s[2],
                s[3]
            )));
        }
        let src = inputs.data();
        let mut out = vec![0.0; src.len()];
        for (o, i) in out.chunks_mut(plane).zip(src.chunks(plane)) {
            for (dst, &from) in o.iter_mut().zip(&self.0) {
                *dst = i[from];
            }
        }
        Tensor::from_vec(s.to_vec(), out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskTransform {
    Identity,
    Permute { permutation: Permutation },
    /// Keep only `classes`; a sample of `classes[i]` is relabeled `i`.
    ClassSubset { classes: Vec<usize> },
}

impl TaskTransform {
    fn apply(&self, base: &LabeledSet) -> Result<LabeledSet> {
        match self {
            TaskTransform::Identity => Ok(base.clone()),
            TaskTransform::Permute { permutation } => Ok(LabeledSet {
                inputs: permutation.apply(&base.inputs)?,
                ..base.clone()
            }),
            TaskTransform::ClassSubset { classes } => {
                let mut remap = vec![None; base.classes];
                for (i, &c) in classes.iter().enumerate() {
                    remap[c] = Some(i);
                }
                let keep: Vec<usize> = (0..base.len()).filter(|&i| remap[base.labels[i]].is_some()).collect();
                let mut set = base.select(&keep);
                set.labels = keep.iter().map(|&i| remap[base.labels[i]].unwrap()).collect();
                set.classes = classes.len();
                Ok(set)
            }
        }
    }
}

/// Optional down-sampling applied to the base splits before any transform.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subset {
    pub train: Option<usize>,
    pub test: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct Task {
    pub id: usize,
    pub transform: TaskTransform,
    base_train: Arc<LabeledSet>,
    base_test: Arc<LabeledSet>,
}

impl Task {
    pub fn train(&self) -> Result<LabeledSet> {
        self.transform.apply(&self.base_train)
    }

    pub fn test(&self) -> Result<LabeledSet> {
        self.transform.apply(&self.base_test)
    }
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    tasks: Vec<Task>,
    seed: u64,
}

impl TaskStream {
    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Keep the first `n` tasks.
    pub fn truncate(mut self, n: usize) -> Self {
        self.tasks.truncate(n);
        self
    }
}

fn sample(set: &LabeledSet, n: Option<usize>, rng: &mut ChaCha8Rng) -> Result<LabeledSet> {
    match n {
        None => Ok(set.clone()),
        Some(n) if n > set.len() => Err(Error::config(format!("subset of {n} exceeds {} samples", set.len()))),
        Some(n) => {
            let mut picked = index::sample(rng, set.len(), n).into_vec();
            picked.sort_unstable();
            Ok(set.select(&picked))
        }
    }
}

/// Task 0 sees the images unchanged; task `i > 0` applies its own seeded pixel permutation.
pub fn permuted_mnist(
    train: &LabeledSet,
    test: &LabeledSet,
    num_tasks: usize,
    seed: u64,
    subset: Option<Subset>,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::config("permuted stream needs at least one task"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let subset = subset.unwrap_or_default();
    let base_train = Arc::new(sample(train, subset.train, &mut rng)?);
    let base_test = Arc::new(sample(test, subset.test, &mut rng)?);
    let s = train.inputs.shape();
    let positions = s[2] * s[3];
    let tasks = (0..num_tasks)
        .map(|id| Task {
            id,
            transform: if id == 0 {
                TaskTransform::Identity
            } else {
                TaskTransform::Permute {
                    permutation: Permutation::random(positions, &mut rng),
                }
            },
            base_train: base_train.clone(),
            base_test: base_test.clone(),
        })
        .collect();
    Ok(TaskStream { tasks, seed })
}

/// Ten 10-way tasks over a seeded partition of the 100 classes.
pub fn split_cifar100(train: &LabeledSet, test: &LabeledSet, seed: u64) -> Result<TaskStream> {
    if train.classes != 100 || test.classes != 100 {
        return Err(Error::data(format!(
            "split stream needs 100 classes, got {}/{}",
            train.classes, test.classes
        )));
    }
    let mut classes: Vec<usize> = (0..100).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base_train = Arc::new(train.clone());
    let base_test = Arc::new(test.clone());
    let tasks = classes
        .chunks(10)
        .enumerate()
        .map(|(id, group)| Task {
            id,
            transform: TaskTransform::ClassSubset { classes: group.to_vec() },
            base_train: base_train.clone(),
            base_test: base_test.clone(),
        })
        .collect();
    Ok(TaskStream { tasks, seed })
}

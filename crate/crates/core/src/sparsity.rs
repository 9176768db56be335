//! Connectivity masks, magnitude/random pruning, weight rewind, and the
//! iterative magnitude pruning (IMP) loop.
//!
//! Pruning is per layer: each round removes `floor(fraction · unmasked)` of the
//! surviving weights in every prunable tensor. Biases are never pruned.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, ParamRole, Parameter};
use crate::tensor::Tensor;

/// Bit-exact copy of every parameter at initialization.
#[derive(Clone, Debug)]
pub struct InitSnapshot {
    entries: Vec<(String, Tensor)>,
}

impl InitSnapshot {
    pub fn capture(params: &[Parameter]) -> Self {
        InitSnapshot {
            entries: params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Which weight tensors take part in pruning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    DenseOnly,
    DenseAndConv,
}

impl PruneScope {
    fn includes(self, role: ParamRole) -> bool {
        match self {
            PruneScope::DenseOnly => role == ParamRole::DenseWeight,
            PruneScope::DenseAndConv => matches!(role, ParamRole::DenseWeight | ParamRole::ConvKernel),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum PruneMethod {
    Magnitude,
    /// Uniformly random victims; the per-round seed is derived from `seed` and the round index.
    Random { seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSchedule {
    #[serde(default = "default_fraction")]
    pub per_round_fraction: f64,
    #[serde(default = "default_target")]
    pub target_remaining: f64,
    #[serde(default)]
    pub scope: PruneScope,
    #[serde(default = "default_method")]
    pub method: PruneMethod,
    /// Hard cap on prune rounds.
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
}

fn default_fraction() -> f64 {
    0.125
}
fn default_target() -> f64 {
    0.011
}
fn default_method() -> PruneMethod {
    PruneMethod::Magnitude
}
fn default_max_rounds() -> usize {
    200
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            per_round_fraction: default_fraction(),
            target_remaining: default_target(),
            scope: PruneScope::default(),
            method: default_method(),
            max_rounds: default_max_rounds(),
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.per_round_fraction > 0.0 && self.per_round_fraction < 1.0) {
            return Err(Error::config(format!(
                "per-round prune fraction {} outside (0,1)",
                self.per_round_fraction
            )));
        }
        if !(self.target_remaining > 0.0 && self.target_remaining <= 1.0) {
            return Err(Error::config(format!("target density {} outside (0,1]", self.target_remaining)));
        }
        Ok(())
    }
}

/// One binary mask congruent to a prunable weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskLayer {
    pub name: String,
    pub shape: Vec<usize>,
    /// One entry per weight: `true` means the connection survives.
    pub keep: Vec<bool>,
}

impl MaskLayer {
    pub fn ones(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    pub fn density(&self) -> f64 {
        self.ones() as f64 / self.keep.len() as f64
    }

    fn to_tensor(&self) -> Tensor {
        let data = self.keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
        Tensor::from_vec(self.shape.clone(), data).expect("mask shape matches length")
    }
}

/// Per-layer binary overlay over every prunable weight tensor.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsityMask {
    pub layers: Vec<MaskLayer>,
}

const MAGIC: &[u8; 4] = b"SPMK";
const VERSION: u16 = 1;

impl SparsityMask {
    /// Current connectivity of the model's in-scope weights (all ones where no mask is set).
    pub fn from_model(model: &Model, scope: PruneScope) -> Self {
        let layers = model
            .params()
            .iter()
            .filter(|p| scope.includes(p.role))
            .map(|p| MaskLayer {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                keep: match &p.mask {
                    Some(m) => m.data().iter().map(|&v| v != 0.0).collect(),
                    None => vec![true; p.value.numel()],
                },
            })
            .collect();
        SparsityMask { layers }
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.keep.len()).sum()
    }

    pub fn ones(&self) -> usize {
        self.layers.iter().map(MaskLayer::ones).sum()
    }

    /// Fraction of in-scope weights still connected.
    pub fn density(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            1.0
        } else {
            self.ones() as f64 / total as f64
        }
    }

    pub fn layer(&self, name: &str) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Install the mask on the model and zero every masked weight.
    pub fn apply(&self, model: &mut Model) -> Result<()> {
        for layer in &self.layers {
            let p = model
                .params_mut()
                .iter_mut()
                .find(|p| p.name == layer.name)
                .ok_or_else(|| Error::Integrity(format!("mask layer {} not in model", layer.name)))?;
            if p.value.shape() != layer.shape.as_slice() {
                return Err(Error::Integrity(format!(
                    "mask layer {} has shape {:?}, weight has {:?}",
                    layer.name,
                    layer.shape,
                    p.value.shape()
                )));
            }
            p.mask = Some(layer.to_tensor());
            p.apply_mask();
        }
        Ok(())
    }

    /// True if every zero of `self` is also zero in `next`.
    pub fn is_superset_of(&self, next: &SparsityMask) -> bool {
        self.layers.len() == next.layers.len()
            && self.layers.iter().zip(&next.layers).all(|(a, b)| {
                a.name == b.name && a.keep.iter().zip(&b.keep).all(|(&x, &y)| x || !y)
            })
    }

    /// Binary layout: magic `SPMK`, u16 version, u32 layer count, then per layer a
    /// u16 name length, the UTF-8 name, u8 rank, `rank` u32 extents and the mask
    /// bit-packed LSB-first. All integers little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            let name = layer.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[layer.shape.len() as u8])?;
            for &d in &layer.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut packed = vec![0u8; layer.keep.len().div_ceil(8)];
            for (i, &k) in layer.keep.iter().enumerate() {
                if k {
                    packed[i / 8] |= 1 << (i % 8);
                }
            }
            w.write_all(&packed)?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R, path: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        if cur.take(4)? != MAGIC {
            return Err(cur.corrupt(0, "bad magic"));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != VERSION {
            return Err(cur.corrupt(4, &format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let mut layers = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = u16::from_le_bytes(cur.take(2)?.try_into().unwrap()) as usize;
            let at = cur.pos;
            let name = String::from_utf8(cur.take(len)?.to_vec()).map_err(|_| cur.corrupt(at, "layer name is not UTF-8"))?;
            let rank = cur.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize);
            }
            let n: usize = shape.iter().product();
            let packed = cur.take(n.div_ceil(8))?;
            let keep = (0..n).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
            layers.push(MaskLayer { name, shape, keep });
        }
        if cur.pos != bytes.len() {
            return Err(cur.corrupt(cur.pos, "trailing bytes"));
        }
        Ok(SparsityMask { layers })
    }

    /// Inspection format: one object per layer with its shape, density and 0/1 entries.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "density": self.density(),
            "layers": self.layers.iter().map(|l| serde_json::json!({
                "name": l.name,
                "shape": l.shape,
                "density": l.density(),
                "mask": l.keep.iter().map(|&k| k as u8).collect::<Vec<_>>(),
            })).collect::<Vec<_>>(),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(self.pos, "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn corrupt(&self, offset: usize, msg: &str) -> Error {
        Error::CorruptFile {
            path: self.path.to_string(),
            offset: offset as u64,
            msg: msg.to_string(),
        }
    }
}

/// Result of one pruning pass.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    pub mask: SparsityMask,
    /// Newly masked weights per layer, in mask order.
    pub pruned: Vec<usize>,
    /// Layers with nothing left to prune.
    pub skipped: Vec<String>,
}

fn check_fraction(fraction: f64) -> Result<()> {
    if fraction > 0.0 && fraction < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("prune fraction {fraction} outside (0,1)")))
    }
}

fn prune_with(
    model: &mut Model,
    mask: &SparsityMask,
    fraction: f64,
    mut choose: impl FnMut(&[usize], &[f64], usize) -> Vec<usize>,
) -> Result<PruneOutcome> {
    check_fraction(fraction)?;
    let mut next = mask.clone();
    let mut pruned = Vec::with_capacity(mask.layers.len());
    let mut skipped = Vec::new();
    for layer in &mut next.layers {
        let p = model
            .params()
            .iter()
            .find(|p| p.name == layer.name)
            .ok_or_else(|| Error::Integrity(format!("mask layer {} not in model", layer.name)))?;
        let candidates: Vec<usize> = (0..layer.keep.len()).filter(|&i| layer.keep[i]).collect();
        if candidates.is_empty() {
            skipped.push(layer.name.clone());
            pruned.push(0);
            continue;
        }
        let count = (fraction * candidates.len() as f64).floor() as usize;
        for i in choose(&candidates, p.value.data(), count) {
            layer.keep[i] = false;
        }
        pruned.push(count);
    }
    next.apply(model)?;
    Ok(PruneOutcome { mask: next, pruned, skipped })
}

/// Mask the `floor(fraction · unmasked)` smallest-magnitude surviving weights of
/// every layer; ties go to the lowest linear index.
pub fn prune_magnitude(model: &mut Model, mask: &SparsityMask, fraction: f64) -> Result<PruneOutcome> {
    prune_with(model, mask, fraction, |candidates, values, count| {
        if count == 0 {
            return Vec::new();
        }
        let mut order = candidates.to_vec();
        let cmp = |&a: &usize, &b: &usize| {
            values[a]
                .abs()
                .partial_cmp(&values[b].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        };
        if count < order.len() {
            order.select_nth_unstable_by(count - 1, cmp);
        }
        order.truncate(count);
        order
    })
}

/// Same counts as [`prune_magnitude`], victims drawn uniformly without replacement.
pub fn prune_random(model: &mut Model, mask: &SparsityMask, fraction: f64, seed: u64) -> Result<PruneOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prune_with(model, mask, fraction, |candidates, _, count| {
        rand::seq::index::sample(&mut rng, candidates.len(), count)
            .into_iter()
            .map(|i| candidates[i])
            .collect()
    })
}

/// Restore every parameter to its initial value and re-apply `mask`.
///
/// Optimizer state is owned by the caller and must be reset alongside.
pub fn rewind(model: &mut Model, snapshot: &InitSnapshot, mask: &SparsityMask) -> Result<()> {
    if snapshot.len() != model.params().len() {
        return Err(Error::Integrity(format!(
            "snapshot has {} tensors, model has {}",
            snapshot.len(),
            model.params().len()
        )));
    }
    for p in model.params_mut() {
        let init = snapshot
            .get(&p.name)
            .ok_or_else(|| Error::Integrity(format!("{} missing from snapshot", p.name)))?;
        if init.shape() != p.value.shape() {
            return Err(Error::Integrity(format!(
                "{} drifted from {:?} to {:?}",
                p.name,
                init.shape(),
                p.value.shape()
            )));
        }
        p.value = init.clone();
        p.apply_mask();
    }
    mask.apply(model)
}

/// Trains a model for one IMP round.
pub trait RoundTrainer {
    /// Train from the current (rewound) weights, leave the model holding the
    /// selected best weights, and return that network's test accuracy.
    fn train_round(&mut self, model: &mut Model, round: usize) -> Result<f64>;
}

impl<F: FnMut(&mut Model, usize) -> Result<f64>> RoundTrainer for F {
    fn train_round(&mut self, model: &mut Model, round: usize) -> Result<f64> {
        self(model, round)
    }
}

#[derive(Clone, Debug)]
pub struct RoundRecord {
    pub round: usize,
    pub density: f64,
    pub best_test_accuracy: f64,
    pub mask: SparsityMask,
    /// Weights removed per layer by the prune that preceded this round.
    pub pruned: Vec<usize>,
}

/// Iterative pruning: train, prune, rewind, repeat until the density target is met.
///
/// Round `r` trains the network left after `r` prunes. The loop stops after the
/// first round whose density is at or below `schedule.target_remaining`.
pub fn imp(model: &mut Model, trainer: &mut impl RoundTrainer, schedule: &PruneSchedule) -> Result<Vec<RoundRecord>> {
    schedule.validate()?;
    let snapshot = model.init_snapshot().clone();
    let mut mask = SparsityMask::from_model(model, schedule.scope);
    mask.apply(model)?;
    let mut pruned = vec![0; mask.layers.len()];
    let mut records = Vec::new();
    for round in 0..=schedule.max_rounds {
        let accuracy = trainer
            .train_round(model, round)
            .map_err(|e| Error::Round { round, source: Box::new(e) })?;
        let density = mask.density();
        records.push(RoundRecord {
            round,
            density,
            best_test_accuracy: accuracy,
            mask: mask.clone(),
            pruned: pruned.clone(),
        });
        if density <= schedule.target_remaining {
            break;
        }
        let outcome = match schedule.method {
            PruneMethod::Magnitude => prune_magnitude(model, &mask, schedule.per_round_fraction)?,
            PruneMethod::Random { seed } => prune_random(
                model,
                &mask,
                schedule.per_round_fraction,
                seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(round as u64),
            )?,
        };
        if outcome.pruned.iter().all(|&c| c == 0) {
            break;
        }
        mask = outcome.mask;
        pruned = outcome.pruned;
        rewind(model, &snapshot, &mask)?;
    }
    Ok(records)
}

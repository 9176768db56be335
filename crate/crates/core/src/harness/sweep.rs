//! Test accuracy under increasing pixel noise.

use serde::{Deserialize, Serialize};

use super::train::evaluate;
use crate::datasets::{inject_noise, LabeledSet, NoiseMode};
use crate::error::Result;
use crate::nn::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub model: String,
    pub p: f64,
    pub accuracy: f64,
    pub seed: u64,
}

/// `{0, 0.05, …, 0.5}`.
pub fn default_p_values() -> Vec<f64> {
    (0..=10).map(|i| i as f64 * 0.05).collect()
}

/// Score every model on `inject_noise(set, p)` for every `p`.
///
/// All levels share one noise seed, so the corrupted positions at a lower `p`
/// are a subset of those at a higher `p`, and every model sees the same images.
pub fn noise_sweep(
    models: &[(&str, &Model)],
    set: &LabeledSet,
    p_values: &[f64],
    seed: u64,
    mode: NoiseMode,
    context: Option<&Tensor>,
    eval_batch: usize,
) -> Result<Vec<NoiseRow>> {
    let mut rows = Vec::with_capacity(models.len() * p_values.len());
    for &p in p_values {
        let noisy = inject_noise(set, p, seed, mode)?;
        for (name, model) in models {
            rows.push(NoiseRow {
                model: name.to_string(),
                p,
                accuracy: evaluate(model, &noisy, context, eval_batch)?,
                seed,
            });
        }
    }
    rows.sort_by(|a, b| {
        let ia = models.iter().position(|(n, _)| *n == a.model);
        let ib = models.iter().position(|(n, _)| *n == b.model);
        ia.cmp(&ib).then(a.p.total_cmp(&b.p))
    });
    Ok(rows)
}

pub fn to_csv(rows: &[NoiseRow]) -> String {
    let mut out = String::from("model,p,accuracy,seed\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.model, r.p, r.accuracy, r.seed));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::toy_blobs;
    use crate::nn::{ArchitectureSpec, PresetOptions};

    #[test]
    fn table_shape_and_clean_column() {
        let set = toy_blobs(100, 4, 0).unwrap();
        let spec = ArchitectureSpec::fc("t", &[1, 1, 16], &[8], 4, &PresetOptions::default());
        let a = Model::build(&spec, 0).unwrap();
        let b = Model::build(&spec, 1).unwrap();
        let ps = default_p_values();
        let rows = noise_sweep(&[("a", &a), ("b", &b)], &set, &ps, 3, NoiseMode::Normalized, None, 64).unwrap();
        assert_eq!(rows.len(), 2 * ps.len());
        assert_eq!(rows[0].accuracy, evaluate(&a, &set, None, 64).unwrap());
        assert_eq!(rows[ps.len()].model, "b");
        let csv = to_csv(&rows);
        assert!(csv.starts_with("model,p,accuracy,seed\na,0,"));
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }
}

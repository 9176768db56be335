//! Salt noise: random pixel positions pushed two standard deviations above the mean.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Corrupted value is exactly `+2.0` in standardized units.
    #[default]
    Normalized,
    /// Corrupted value is `mean + 2σ` in raw pixel units, clipped to 1, then standardized.
    Raw,
}

/// Copy of `set` where each pixel position is corrupted with probability `p`.
/// Every channel at a chosen position is overwritten.
pub fn inject_noise(set: &LabeledSet, p: f64, seed: u64, mode: NoiseMode) -> Result<LabeledSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("noise probability {p} outside [0, 1]")));
    }
    let s = set.inputs.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let values: Vec<f64> = (0..c)
        .map(|ch| match mode {
            NoiseMode::Normalized => 2.0,
            NoiseMode::Raw => ((set.mean[ch] + 2.0 * set.std[ch]).min(1.0) - set.mean[ch]) / set.std[ch],
        })
        .collect();
    let mut out = set.clone();
    if p == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = out.inputs.data_mut();
    for i in 0..n {
        for pos in 0..plane {
            if rng.random_bool(p) {
                for (ch, &v) in values.iter().enumerate() {
                    data[(i * c + ch) * plane + pos] = v;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn rgb(n: usize) -> LabeledSet {
        let data = (0..n * 3 * 8 * 8).map(|v| (v % 7) as f64 * 0.1 - 0.3).collect();
        LabeledSet::from_raw(Tensor::from_vec(vec![n, 3, 8, 8], data).unwrap(), vec![0; n], 1).unwrap()
    }

    #[test]
    fn extremes() {
        let set = rgb(4);
        assert_eq!(inject_noise(&set, 0.0, 1, NoiseMode::Normalized).unwrap(), set);
        let all = inject_noise(&set, 1.0, 1, NoiseMode::Normalized).unwrap();
        assert!(all.inputs.data().iter().all(|&v| v == 2.0));
        assert_eq!(all.labels, set.labels);
        assert!(inject_noise(&set, 1.5, 1, NoiseMode::Normalized).is_err());
    }

    #[test]
    fn whole_positions_only() {
        let set = rgb(10);
        let noisy = inject_noise(&set, 0.3, 7, NoiseMode::Normalized).unwrap();
        let d = noisy.inputs.data();
        for i in 0..10 {
            for pos in 0..64 {
                let hits: Vec<bool> = (0..3).map(|ch| d[(i * 3 + ch) * 64 + pos] == 2.0).collect();
                assert!(hits.iter().all(|&h| h == hits[0]));
            }
        }
    }

    #[test]
    fn raw_mode_clips_to_full_intensity() {
        let mut set = rgb(1);
        set.mean = vec![0.5, 0.1, 0.1];
        set.std = vec![0.4, 0.2, 0.2];
        let noisy = inject_noise(&set, 1.0, 0, NoiseMode::Raw).unwrap();
        let d = noisy.inputs.data();
        assert!((d[0] - 1.25).abs() < 1e-12);
        assert!((d[64] - 2.0).abs() < 1e-12);
    }
}

//! Active-dendrite gating and task context vectors.
//!
//! A dendritic neuron computes its ordinary feedforward response and multiplies
//! it by `sigmoid(v*)`, where `v*` is the signed response of whichever segment
//! reacts most strongly (in magnitude) to the context vector. Convolutional
//! layers share one set of segments per output channel, so a whole feature map
//! is scaled by a single gate.

use serde::{Deserialize, Serialize};

use crate::autograd::{abs_argmax, sigmoid, Graph};
use crate::datasets::LabeledSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Segment weights for a layer: `[neurons × segments × context_dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DendriteBank {
    segments: Tensor,
}

impl DendriteBank {
    pub fn new(segments: Tensor) -> Result<Self> {
        let s = segments.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::config(format!(
                "dendrite bank must be [neurons × segments × context_dim] with at least one segment, got {s:?}"
            )));
        }
        Ok(DendriteBank { segments })
    }

    pub fn neurons(&self) -> usize {
        self.segments.shape()[0]
    }

    pub fn num_segments(&self) -> usize {
        self.segments.shape()[1]
    }

    pub fn context_dim(&self) -> usize {
        self.segments.shape()[2]
    }

    pub fn segments(&self) -> &Tensor {
        &self.segments
    }

    /// Per-neuron `(selected segment, gate value)` for a context.
    pub fn gates(&self, context: &Tensor) -> Result<Vec<(usize, f64)>> {
        let (n, j, d) = (self.neurons(), self.num_segments(), self.context_dim());
        if context.numel() != d {
            return Err(Error::config(format!(
                "context length {} does not match dendrite context dimension {d}",
                context.numel()
            )));
        }
        let seg = self.segments.data();
        let ctx = context.data();
        Ok((0..n)
            .map(|i| {
                let responses: Vec<f64> = (0..j)
                    .map(|s| {
                        let u = &seg[(i * j + s) * d..(i * j + s + 1) * d];
                        u.iter().zip(ctx).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                let best = abs_argmax(&responses);
                (best, sigmoid(responses[best]))
            })
            .collect())
    }
}

/// Gate a dense layer's output `[batch × n]`.
pub fn gate(feedforward: &Tensor, context: &Tensor, bank: &DendriteBank) -> Result<Tensor> {
    if feedforward.shape().len() != 2 {
        return Err(Error::Dimension {
            op: "gate",
            lhs: feedforward.shape().to_vec(),
            rhs: bank.segments.shape().to_vec(),
        });
    }
    gate_any(feedforward, context, bank)
}

/// Gate a conv layer's output `[N × C × H × W]`, one gate per channel.
pub fn gate_conv(feedforward: &Tensor, context: &Tensor, bank: &DendriteBank) -> Result<Tensor> {
    if feedforward.shape().len() != 4 {
        return Err(Error::Dimension {
            op: "gate_conv",
            lhs: feedforward.shape().to_vec(),
            rhs: bank.segments.shape().to_vec(),
        });
    }
    gate_any(feedforward, context, bank)
}

fn gate_any(feedforward: &Tensor, context: &Tensor, bank: &DendriteBank) -> Result<Tensor> {
    let mut g = Graph::new();
    let ff = g.constant(feedforward.clone());
    let u = g.constant(bank.segments.clone());
    let out = g.gate(ff, u, context)?;
    Ok(g.value(out).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextKind {
    OneHot,
    Zeros,
    TaskAverage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextSpec {
    pub kind: ContextKind,
    pub num_tasks: usize,
    /// Flattened input length; only used by `task_average`.
    #[serde(default)]
    pub input_dim: usize,
}

impl ContextSpec {
    pub fn one_hot(num_tasks: usize) -> Self {
        ContextSpec {
            kind: ContextKind::OneHot,
            num_tasks,
            input_dim: 0,
        }
    }

    pub fn zeros(num_tasks: usize) -> Self {
        ContextSpec {
            kind: ContextKind::Zeros,
            num_tasks,
            input_dim: 0,
        }
    }

    pub fn task_average(num_tasks: usize, input_dim: usize) -> Self {
        ContextSpec {
            kind: ContextKind::TaskAverage,
            num_tasks,
            input_dim,
        }
    }

    /// Length of the produced context vectors.
    pub fn dim(&self) -> usize {
        match self.kind {
            ContextKind::OneHot | ContextKind::Zeros => self.num_tasks,
            ContextKind::TaskAverage => self.input_dim,
        }
    }
}

/// Context vector for `task_id`.
pub fn make_context(spec: &ContextSpec, task_id: usize, task_data: Option<&LabeledSet>) -> Result<Tensor> {
    if task_id >= spec.num_tasks {
        return Err(Error::config(format!(
            "task {task_id} out of range for {} tasks",
            spec.num_tasks
        )));
    }
    match spec.kind {
        ContextKind::OneHot => {
            let mut c = Tensor::zeros(&[spec.num_tasks]);
            c.data_mut()[task_id] = 1.0;
            Ok(c)
        }
        ContextKind::Zeros => Ok(Tensor::zeros(&[spec.num_tasks])),
        ContextKind::TaskAverage => {
            let data = task_data.ok_or_else(|| Error::usage("task-average context needs the task's training data"))?;
            let n = data.len();
            if n == 0 {
                return Err(Error::data("task-average context over an empty set"));
            }
            let per: usize = data.inputs.shape()[1..].iter().product();
            if spec.input_dim != 0 && spec.input_dim != per {
                return Err(Error::config(format!(
                    "task-average context expects input_dim {}, data has {per}",
                    spec.input_dim
                )));
            }
            let mut mean = vec![0.0; per];
            for row in data.inputs.data().chunks(per) {
                mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            Tensor::from_vec(vec![per], mean)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_context_halves_output() {
        let bank = DendriteBank::new(t(&[3, 2, 4], &(0..24).map(|v| v as f64 * 0.1 - 1.0).collect::<Vec<_>>())).unwrap();
        let ff = t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 0.5, -0.25]);
        let out = gate(&ff, &Tensor::zeros(&[4]), &bank).unwrap();
        for (o, f) in out.data().iter().zip(ff.data()) {
            assert_eq!(*o, 0.5 * f);
        }
    }

    #[test]
    fn abs_max_segment_keeps_sign() {
        // segment responses v = [-3, 2] for context [1, 1]
        let bank = DendriteBank::new(t(&[1, 2, 2], &[-1.0, -2.0, 1.0, 1.0])).unwrap();
        let gates = bank.gates(&t(&[2], &[1.0, 1.0])).unwrap();
        assert_eq!(gates[0].0, 0);
        assert!((gates[0].1 - 0.04743).abs() < 1e-5);
    }

    #[test]
    fn aligned_one_hot_gives_sigmoid_one() {
        let bank = DendriteBank::new(t(&[1, 1, 3], &[0.0, 1.0, 0.0])).unwrap();
        let gates = bank.gates(&t(&[3], &[0.0, 1.0, 0.0])).unwrap();
        assert!((gates[0].1 - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn conv_gate_scales_whole_channels() {
        let bank = DendriteBank::new(t(&[2, 1, 1], &[5.0, -5.0])).unwrap();
        let ff = Tensor::ones(&[2, 2, 3, 3]);
        let out = gate_conv(&ff, &t(&[1], &[1.0]), &bank).unwrap();
        let d = out.data();
        for n in 0..2 {
            let c0 = &d[n * 18..n * 18 + 9];
            let c1 = &d[n * 18 + 9..n * 18 + 18];
            assert!(c0.iter().all(|&v| v == sigmoid(5.0)));
            assert!(c1.iter().all(|&v| v == sigmoid(-5.0)));
            assert!((c0[0] / c1[0] - 148.4).abs() < 0.05);
        }
    }

    #[test]
    fn context_length_mismatch_is_config_error() {
        let bank = DendriteBank::new(Tensor::zeros(&[2, 1, 3])).unwrap();
        assert!(matches!(
            gate(&Tensor::zeros(&[1, 2]), &Tensor::zeros(&[4]), &bank),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn context_builders() {
        let c = make_context(&ContextSpec::one_hot(4), 2, None).unwrap();
        assert_eq!(c.data(), &[0.0, 0.0, 1.0, 0.0]);
        let z = make_context(&ContextSpec::zeros(10), 7, None).unwrap();
        assert_eq!(z.data(), &[0.0; 10]);
        assert!(matches!(
            make_context(&ContextSpec::task_average(2, 2), 0, None),
            Err(Error::Usage(_))
        ));
        let set = LabeledSet::from_raw(t(&[2, 1, 1, 2], &[0.0, 2.0, 2.0, 0.0]), vec![0, 1], 2).unwrap();
        let avg = make_context(&ContextSpec::task_average(2, 2), 1, Some(&set)).unwrap();
        assert_eq!(avg.data(), &[1.0, 1.0]);
        assert!(make_context(&ContextSpec::one_hot(3), 3, None).is_err());
    }
}

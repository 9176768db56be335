//! SGD and Adam with coupled L2 weight decay and hard mask enforcement.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Parameter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: beta1(),
            beta2: beta2(),
            eps: eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(flatten)]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::adam(),
            lr,
            weight_decay,
        }
    }

    pub fn sgd(lr: f64) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Sgd { momentum: 0.0 },
            lr,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter moment buffers plus the step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first: Vec::new(),
            second: Vec::new(),
            step: 0,
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Drop all moment state, as after a rewind.
    pub fn reset(&mut self) {
        self.first.clear();
        self.second.clear();
        self.step = 0;
    }

    /// One update of every parameter from its accumulated `grad`.
    ///
    /// Masked positions get zero gradient before the moments see it, and are
    /// forced back to exactly zero (weights and moments) afterwards.
    pub fn step(&mut self, params: &mut [Parameter]) -> Result<()> {
        for p in params.iter() {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
        }
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        self.step += 1;
        let t = self.step as f64;
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            let mask = p.mask.as_ref().map(|m| m.data());
            let values = p.value.data_mut();
            let grads = p.grad.data();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    for j in 0..values.len() {
                        if mask.is_some_and(|mk| mk[j] == 0.0) {
                            continue;
                        }
                        let g = grads[j] + wd * values[j];
                        let d = if momentum != 0.0 {
                            m[j] = momentum * m[j] + g;
                            m[j]
                        } else {
                            g
                        };
                        values[j] -= lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    for j in 0..values.len() {
                        if mask.is_some_and(|mk| mk[j] == 0.0) {
                            continue;
                        }
                        let g = grads[j] + wd * values[j];
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if let Some(mask) = mask {
                for j in 0..values.len() {
                    if mask[j] == 0.0 {
                        values[j] = 0.0;
                        m[j] = 0.0;
                        v[j] = 0.0;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamRole, Parameter};

    fn scalar_param(w: f64, g: f64) -> Parameter {
        Parameter {
            name: "w".into(),
            role: ParamRole::DenseWeight,
            value: Tensor::from_vec(vec![1], vec![w]).unwrap(),
            grad: Tensor::from_vec(vec![1], vec![g]).unwrap(),
            mask: None,
        }
    }

    #[test]
    fn sgd_hand_update() {
        let mut params = vec![scalar_param(1.0, 1.0)];
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1));
        opt.step(&mut params).unwrap();
        assert!((params[0].value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_lr_is_identity() {
        for config in [OptimizerConfig::sgd(0.0), OptimizerConfig::adam(0.0, 1e-4)] {
            let mut params = vec![scalar_param(0.37, -2.0)];
            let mut opt = Optimizer::new(config);
            for _ in 0..5 {
                opt.step(&mut params).unwrap();
            }
            assert_eq!(params[0].value.data()[0], 0.37);
        }
    }

    #[test]
    fn adam_zero_grad_no_decay_is_identity() {
        let mut params = vec![scalar_param(1.25, 0.0)];
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 0.0));
        for _ in 0..10 {
            opt.step(&mut params).unwrap();
        }
        assert_eq!(params[0].value.data()[0], 1.25);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // bias-corrected first step is lr · g/|g| (up to eps)
        let mut params = vec![scalar_param(1.0, 3.0)];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01, 0.0));
        opt.step(&mut params).unwrap();
        assert!((params[0].value.data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn masked_scalar_stays_zero() {
        let mut p = scalar_param(0.0, 1.0);
        p.mask = Some(Tensor::zeros(&[1]));
        let mut params = vec![p];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 1e-4));
        for _ in 0..10 {
            opt.step(&mut params).unwrap();
            assert_eq!(params[0].value.data()[0].to_bits(), 0.0f64.to_bits());
        }
        assert_eq!(opt.first_moments()[0].data()[0], 0.0);
        assert_eq!(opt.second_moments()[0].data()[0], 0.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = vec![scalar_param(1.0, f64::NAN)];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 0.0));
        match opt.step(&mut params) {
            Err(Error::NonFiniteGradient(name)) => assert_eq!(name, "w"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn reset_clears_state() {
        let mut params = vec![scalar_param(1.0, 1.0)];
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1, 0.0));
        opt.step(&mut params).unwrap();
        opt.reset();
        assert_eq!(opt.steps(), 0);
        assert!(opt.first_moments().is_empty());
    }
}

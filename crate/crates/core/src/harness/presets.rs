//! Ready-made experiment configs. Desk-scale variants use MNIST subsets and
//! short schedules; `full` switches to whole datasets and longer training.

use super::experiment::{
    ContinualExperiment, DataSource, DataSpec, Experiment, ExperimentConfig, GridExperiment, ImpExperiment, ModelSpec,
    NoiseArm, NoiseSpec, StreamSpec, TrainExperiment,
};
use super::grid::GridSpec;
use super::sweep::default_p_values;
use super::train::TrainConfig;
use crate::datasets::NoiseMode;
use crate::dendrite::ContextKind;
use crate::error::{Error, Result};
use crate::nn::{DendriteOptions, PresetOptions};
use crate::sparsity::PruneSchedule;

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

fn mnist(full: bool) -> DataSpec {
    DataSpec {
        source: DataSource::Mnist,
        train_subset: (!full).then_some(10_000),
        val_size: 5_000,
        test_subset: None,
        seed: 0,
    }
}

fn lth_train(full: bool) -> TrainConfig {
    TrainConfig::adam(if full { 10 } else { 4 }, 60, 1.2e-3, 1e-4)
}

/// Dense FC 784→300→10 on MNIST.
pub fn train_mnist(full: bool) -> Experiment {
    Experiment {
        seeds: DEFAULT_SEEDS.to_vec(),
        experiment: ExperimentConfig::Train(TrainExperiment {
            data: mnist(full),
            model: ModelSpec::Fc { hidden: vec![300], options: PresetOptions::default() },
            train: lth_train(full),
        }),
    }
}

/// Separable synthetic data; runs in well under a second.
pub fn train_toy() -> Experiment {
    Experiment {
        seeds: vec![0],
        experiment: ExperimentConfig::Train(TrainExperiment {
            data: DataSpec {
                source: DataSource::Toy { classes: 4, train: 600, test: 200 },
                train_subset: Some(400),
                val_size: 100,
                test_subset: None,
                seed: 0,
            },
            model: ModelSpec::Fc { hidden: vec![32], options: PresetOptions::default() },
            train: TrainConfig::adam(5, 20, 1e-2, 1e-4),
        }),
    }
}

/// Iterative magnitude pruning of FC 784→300→10 with a random-pruning control.
pub fn lth(full: bool) -> Experiment {
    Experiment {
        seeds: DEFAULT_SEEDS.to_vec(),
        experiment: ExperimentConfig::Imp(ImpExperiment {
            data: mnist(full),
            model: ModelSpec::Fc { hidden: vec![300], options: PresetOptions::default() },
            train: lth_train(full),
            schedule: PruneSchedule::default(),
            random_control: true,
            noise: None,
        }),
    }
}

/// [`lth`] followed by a noise sweep of the dense net, the winning tickets at
/// about 30% and 3% density, and the random ticket at about 30%.
pub fn noise(full: bool) -> Experiment {
    let mut exp = lth(full);
    if let ExperimentConfig::Imp(i) = &mut exp.experiment {
        let arm = |label: &str, arm: &str, density: f64| NoiseArm { label: label.into(), arm: arm.into(), density };
        i.noise = Some(NoiseSpec {
            p_values: default_p_values(),
            mode: NoiseMode::Normalized,
            seed: 0,
            arms: vec![
                arm("dense", "magnitude", 1.0),
                arm("w30", "magnitude", 0.30),
                arm("w3", "magnitude", 0.03),
                arm("r30", "random", 0.30),
            ],
        });
    }
    exp
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContinualArm {
    Mlp,
    AdnOneHot,
    AdnZeros,
    AdnTaskAverage,
}

impl ContinualArm {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(ContinualArm::Mlp),
            "adn-1hot" | "adn_onehot" => Ok(ContinualArm::AdnOneHot),
            "adn-zeros" | "adn_zeros" => Ok(ContinualArm::AdnZeros),
            "adn-avg" | "adn_task_average" => Ok(ContinualArm::AdnTaskAverage),
            other => Err(Error::config(format!(
                "unknown continual arm {other:?} (mlp, adn-1hot, adn-zeros, adn-avg)"
            ))),
        }
    }

    fn context(self) -> Option<ContextKind> {
        match self {
            ContinualArm::Mlp => None,
            ContinualArm::AdnOneHot => Some(ContextKind::OneHot),
            ContinualArm::AdnZeros => Some(ContextKind::Zeros),
            ContinualArm::AdnTaskAverage => Some(ContextKind::TaskAverage),
        }
    }
}

pub const PMNIST_HIDDEN: usize = 256;
pub const PMNIST_SEGMENTS: usize = 10;
pub const PMNIST_ACTIVATION_DENSITY: f64 = 0.1;

/// Ten-task permuted MNIST with two hidden layers of 256 units.
///
/// The plain arm uses ReLU; dendritic arms swap in kWTA and add one dendrite
/// bank per hidden layer. All arms share the optimizer settings.
pub fn continual_pmnist(arm: ContinualArm, full: bool) -> Experiment {
    let options = match arm {
        ContinualArm::Mlp => PresetOptions::default(),
        _ => PresetOptions {
            conv_activation_density: 1.0,
            ff_activation_density: PMNIST_ACTIVATION_DENSITY,
            ff_weight_density: 1.0,
            dendrites: Some(DendriteOptions { segments: PMNIST_SEGMENTS, context_dim: 10 }),
        },
    };
    let hidden = if full { 2048 } else { PMNIST_HIDDEN };
    Experiment {
        seeds: DEFAULT_SEEDS.to_vec(),
        experiment: ExperimentConfig::Continual(ContinualExperiment {
            stream: StreamSpec::PermutedMnist {
                num_tasks: 10,
                train_per_task: (!full).then_some(10_000),
                test_per_task: None,
                seed: 0,
            },
            model: ModelSpec::Fc { hidden: vec![hidden, hidden], options },
            train: TrainConfig::adam(3, 128, 1e-3, 0.0),
            context: arm.context(),
        }),
    }
}

/// Split CIFAR-100 with the small CNN. Hyperparameters are the selected grid
/// values for each network family.
pub fn continual_split_cifar(arm: ContinualArm, full: bool) -> Experiment {
    let (options, train) = match arm {
        ContinualArm::Mlp => (PresetOptions::default(), TrainConfig::adam(3, 64, 1e-3, 1e-5)),
        _ => (
            PresetOptions {
                conv_activation_density: 0.2,
                ff_activation_density: 0.3,
                ff_weight_density: 0.5,
                dendrites: Some(DendriteOptions { segments: 10, context_dim: 10 }),
            },
            TrainConfig::adam(3, 128, 1e-3, 0.0),
        ),
    };
    Experiment {
        seeds: DEFAULT_SEEDS.to_vec(),
        experiment: ExperimentConfig::Continual(ContinualExperiment {
            stream: StreamSpec::SplitCifar100 { num_tasks: (!full).then_some(3), seed: 0 },
            model: ModelSpec::Lenet5 { options },
            train,
            context: arm.context(),
        }),
    }
}

/// KWTA CNN without dendrites at the selected sparse-network values.
pub fn continual_split_cifar_sparse(full: bool) -> Experiment {
    let mut exp = continual_split_cifar(ContinualArm::Mlp, full);
    if let ExperimentConfig::Continual(c) = &mut exp.experiment {
        c.model = ModelSpec::Lenet5 {
            options: PresetOptions {
                conv_activation_density: 0.2,
                ff_activation_density: 0.1,
                ff_weight_density: 0.5,
                dendrites: None,
            },
        };
        c.train = TrainConfig::adam(3, 32, 1e-3, 0.0);
    }
    exp
}

/// Grid over the base-CNN axes (`sparse = false`) or the sparse/dendritic axes.
pub fn grid(sparse: bool, dendritic: bool, full: bool) -> Experiment {
    let template = if dendritic {
        continual_split_cifar(ContinualArm::AdnOneHot, full)
    } else if sparse {
        continual_split_cifar_sparse(full)
    } else {
        continual_split_cifar(ContinualArm::Mlp, full)
    };
    let mut template = template.experiment;
    if let ExperimentConfig::Continual(c) = &mut template {
        if !full {
            c.train.epochs = 1;
        }
    }
    Experiment {
        seeds: vec![0],
        experiment: ExperimentConfig::Grid(GridExperiment {
            grid: if sparse || dendritic { GridSpec::sparse() } else { GridSpec::base_cnn() },
            template: Box::new(template),
            workers: 1,
        }),
    }
}

//! JSON experiment configs and the runners behind each CLI subcommand.
//!
//! A run log starts with the serialized [`Experiment`], so any log can be
//! replayed by parsing its config event and calling [`run`] again.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::continual::{continual, TaskResult};
use super::grid::{grid_search, GridOutcome, GridPoint, GridSpec};
use super::record::{Event, RunRecord};
use super::sweep::{noise_sweep, NoiseRow};
use super::train::{train, EpochMetrics, TrainConfig, TrainData, TrainOutcome};
use crate::datasets::{
    load_cifar, load_mnist, permuted_mnist, split_cifar100, toy_blobs, LabeledSet, NoiseMode, Subset, TaskStream,
};
use crate::dendrite::{ContextKind, ContextSpec};
use crate::error::{Error, Result};
use crate::nn::{ArchitectureSpec, Model, PresetOptions};
use crate::optimize::Optimizer;
use crate::sparsity::{imp, PruneMethod, PruneSchedule, RoundRecord};
use crate::tensor::Tensor;

type Pair = Arc<(LabeledSet, LabeledSet)>;

/// Loads each dataset from disk at most once; shared across seeds and grid workers.
#[derive(Debug)]
pub struct DataCache {
    root: PathBuf,
    mnist: Mutex<Option<Pair>>,
    cifar10: Mutex<Option<Pair>>,
    cifar100: Mutex<Option<Pair>>,
}

impl DataCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DataCache {
            root: root.into(),
            mnist: Mutex::new(None),
            cifar10: Mutex::new(None),
            cifar100: Mutex::new(None),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn get(&self, slot: &Mutex<Option<Pair>>, load: impl FnOnce(&Path) -> Result<(LabeledSet, LabeledSet)>) -> Result<Pair> {
        let mut slot = slot.lock().unwrap();
        if let Some(p) = slot.as_ref() {
            return Ok(p.clone());
        }
        let pair = Arc::new(load(&self.root)?);
        *slot = Some(pair.clone());
        Ok(pair)
    }

    pub fn mnist(&self) -> Result<Pair> {
        self.get(&self.mnist, |r| load_mnist(r))
    }

    pub fn cifar10(&self) -> Result<Pair> {
        self.get(&self.cifar10, |r| load_cifar(r, 10))
    }

    pub fn cifar100(&self) -> Result<Pair> {
        self.get(&self.cifar100, |r| load_cifar(r, 100))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Mnist,
    Cifar10,
    Cifar100,
    Toy { classes: usize, train: usize, test: usize },
}

/// Which dataset and how much of it. Validation images are drawn from the
/// training pool and never overlap the training subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub source: DataSource,
    #[serde(default)]
    pub train_subset: Option<usize>,
    #[serde(default)]
    pub val_size: usize,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledSet,
    pub val: Option<LabeledSet>,
    pub test: LabeledSet,
}

pub fn load_splits(spec: &DataSpec, cache: &DataCache) -> Result<Splits> {
    let pair = match &spec.source {
        DataSource::Mnist => cache.mnist()?,
        DataSource::Cifar10 => cache.cifar10()?,
        DataSource::Cifar100 => cache.cifar100()?,
        DataSource::Toy { classes, train, test } => Arc::new((
            toy_blobs(*train, *classes, spec.seed)?,
            toy_blobs(*test, *classes, spec.seed.wrapping_add(1))?,
        )),
    };
    let (pool, test) = (&pair.0, &pair.1);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut rng);
    let n_train = spec.train_subset.unwrap_or(pool.len() - spec.val_size.min(pool.len()));
    if spec.val_size + n_train > pool.len() {
        return Err(Error::config(format!(
            "{} training + {} validation images requested from a pool of {}",
            n_train,
            spec.val_size,
            pool.len()
        )));
    }
    let mut val_idx = order[..spec.val_size].to_vec();
    let mut train_idx = order[spec.val_size..spec.val_size + n_train].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let test = match spec.test_subset {
        None => test.clone(),
        Some(n) if n > test.len() => {
            return Err(Error::config(format!("test subset {n} exceeds {} images", test.len())))
        }
        Some(n) => {
            let mut idx: Vec<usize> = (0..test.len()).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx.sort_unstable();
            test.select(&idx)
        }
    };
    Ok(Splits {
        train: pool.select(&train_idx),
        val: (spec.val_size > 0).then(|| pool.select(&val_idx)),
        test,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case")]
pub enum ModelSpec {
    Fc {
        hidden: Vec<usize>,
        #[serde(default)]
        options: PresetOptions,
    },
    Lenet5 {
        #[serde(default)]
        options: PresetOptions,
    },
    Custom {
        architecture: ArchitectureSpec,
    },
}

impl ModelSpec {
    pub fn resolve(&self, input: &[usize], classes: usize) -> ArchitectureSpec {
        match self {
            ModelSpec::Fc { hidden, options } => ArchitectureSpec::fc("fc", input, hidden, classes, options),
            ModelSpec::Lenet5 { options } => ArchitectureSpec::lenet5(input, classes, options),
            ModelSpec::Custom { architecture } => architecture.clone(),
        }
    }

    fn options_mut(&mut self) -> Option<&mut PresetOptions> {
        match self {
            ModelSpec::Fc { options, .. } | ModelSpec::Lenet5 { options } => Some(options),
            ModelSpec::Custom { .. } => None,
        }
    }

    /// Point every dendritic layer at a context of length `dim`.
    fn with_context_dim(&self, dim: usize) -> ModelSpec {
        let mut out = self.clone();
        match &mut out {
            ModelSpec::Custom { architecture } => {
                if architecture.context_dim.is_some() {
                    architecture.context_dim = Some(dim);
                }
            }
            other => {
                if let Some(d) = other.options_mut().and_then(|o| o.dendrites.as_mut()) {
                    d.context_dim = dim;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainExperiment {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
}

/// A trained network to put through the noise sweep: the round of `arm`
/// whose density is nearest `density`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseArm {
    pub label: String,
    pub arm: String,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub p_values: Vec<f64>,
    #[serde(default)]
    pub mode: NoiseMode,
    #[serde(default)]
    pub seed: u64,
    pub arms: Vec<NoiseArm>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpExperiment {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: PruneSchedule,
    /// Also run the random-pruning arm with the same schedule and initialization.
    #[serde(default)]
    pub random_control: bool,
    #[serde(default)]
    pub noise: Option<NoiseSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StreamSpec {
    PermutedMnist {
        num_tasks: usize,
        #[serde(default)]
        train_per_task: Option<usize>,
        #[serde(default)]
        test_per_task: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
    SplitCifar100 {
        #[serde(default)]
        num_tasks: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl StreamSpec {
    pub fn build(&self, cache: &DataCache) -> Result<TaskStream> {
        match self {
            StreamSpec::PermutedMnist { num_tasks, train_per_task, test_per_task, seed } => {
                let pair = cache.mnist()?;
                let subset = Subset { train: *train_per_task, test: *test_per_task };
                permuted_mnist(&pair.0, &pair.1, *num_tasks, *seed, Some(subset))
            }
            StreamSpec::SplitCifar100 { num_tasks, seed } => {
                let pair = cache.cifar100()?;
                let stream = split_cifar100(&pair.0, &pair.1, *seed)?;
                Ok(match num_tasks {
                    Some(n) => stream.truncate(*n),
                    None => stream,
                })
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinualExperiment {
    pub stream: StreamSpec,
    /// Dendritic layers get their context length from `context` automatically.
    pub model: ModelSpec,
    /// `epochs` is the per-task budget.
    pub train: TrainConfig,
    #[serde(default)]
    pub context: Option<ContextKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridExperiment {
    pub grid: GridSpec,
    pub template: Box<ExperimentConfig>,
    #[serde(default = "one_worker")]
    pub workers: usize,
}

fn one_worker() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExperimentConfig {
    Train(TrainExperiment),
    Imp(ImpExperiment),
    Continual(ContinualExperiment),
    Grid(GridExperiment),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub seeds: Vec<u64>,
    pub experiment: ExperimentConfig,
}

impl Experiment {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("experiment config: {e}")))
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configs always serialize")
    }

    /// Same experiment restricted to one seed.
    pub fn with_seeds(&self, seeds: &[u64]) -> Self {
        Experiment { seeds: seeds.to_vec(), experiment: self.experiment.clone() }
    }

    /// Fresh log for this config, on disk when `path` is given.
    pub fn record(&self, path: Option<&Path>) -> Result<RunRecord> {
        match path {
            Some(p) => RunRecord::create(p, self.to_value(), &self.seeds),
            None => Ok(RunRecord::in_memory(self.to_value(), &self.seeds)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub arm: String,
    pub rounds: Vec<RoundRecord>,
}

#[derive(Clone, Debug)]
pub struct SeedImp {
    pub seed: u64,
    pub arms: Vec<ArmResult>,
    pub noise: Vec<NoiseRow>,
}

impl SeedImp {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == name)
    }
}

#[derive(Clone, Debug)]
pub enum Outcome {
    Train(Vec<(u64, TrainOutcome)>),
    Imp(Vec<SeedImp>),
    Continual(Vec<(u64, Vec<TaskResult>)>),
    Grid(GridOutcome),
}

fn epoch_event(seed: u64, scope: &str, m: &EpochMetrics) -> Event {
    Event::Epoch {
        seed,
        scope: scope.to_string(),
        epoch: m.epoch,
        train_loss: m.train_loss,
        train_accuracy: m.train_accuracy,
        val_accuracy: m.val_accuracy,
        test_accuracy: m.test_accuracy,
    }
}

/// Seed for the `slot`-th derived stream of a run seed.
pub fn derive_seed(seed: u64, slot: u64) -> u64 {
    super::grid::point_seed(seed, slot as usize)
}

/// Run every seed of `exp`, appending events to `record`.
pub fn run(exp: &Experiment, cache: &DataCache, record: &mut RunRecord) -> Result<Outcome> {
    if exp.seeds.is_empty() && !matches!(exp.experiment, ExperimentConfig::Grid(_)) {
        return Err(Error::config("experiment lists no seeds"));
    }
    match &exp.experiment {
        ExperimentConfig::Train(t) => run_train(t, &exp.seeds, cache, record).map(Outcome::Train),
        ExperimentConfig::Imp(i) => run_imp(i, &exp.seeds, cache, record).map(Outcome::Imp),
        ExperimentConfig::Continual(c) => run_continual(c, &exp.seeds, cache, record).map(Outcome::Continual),
        ExperimentConfig::Grid(g) => run_grid(g, exp.seeds.first().copied().unwrap_or(0), &exp.seeds, cache, record).map(Outcome::Grid),
    }
}

fn build_model(spec: &ModelSpec, splits: &Splits, seed: u64) -> Result<Model> {
    let arch = spec.resolve(&splits.train.sample_shape(), splits.train.classes);
    if arch.context_dim.is_some() {
        return Err(Error::config("dendritic models need a task context; use a continual experiment"));
    }
    Model::build(&arch, seed)
}

fn run_train(t: &TrainExperiment, seeds: &[u64], cache: &DataCache, record: &mut RunRecord) -> Result<Vec<(u64, TrainOutcome)>> {
    let splits = load_splits(&t.data, cache)?;
    let mut out = Vec::new();
    for &seed in seeds {
        let mut model = build_model(&t.model, &splits, seed)?;
        let mut opt = Optimizer::new(t.train.optimizer.clone());
        let data = TrainData { train: &splits.train, val: splits.val.as_ref(), test: Some(&splits.test), context: None };
        let outcome = train(&mut model, &mut opt, data, &t.train, derive_seed(seed, 0), &mut |m| {
            record.push(epoch_event(seed, "train", m))
        })?;
        if let Some(acc) = outcome.test_accuracy() {
            record.push(Event::Summary { seed, name: "test_accuracy".into(), value: acc })?;
        }
        out.push((seed, outcome));
    }
    Ok(out)
}

fn nearest_round(rounds: &[RoundRecord], density: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in rounds.iter().enumerate() {
        if best.is_none_or(|b| (r.density - density).abs() < (rounds[b].density - density).abs()) {
            best = Some(i);
        }
    }
    best
}

fn run_imp(cfg: &ImpExperiment, seeds: &[u64], cache: &DataCache, record: &mut RunRecord) -> Result<Vec<SeedImp>> {
    let splits = load_splits(&cfg.data, cache)?;
    let mut arms = vec![("magnitude".to_string(), PruneMethod::Magnitude)];
    if cfg.random_control {
        arms.push(("random".to_string(), PruneMethod::Random { seed: 0 }));
    }
    let mut out = Vec::new();
    for &seed in seeds {
        let mut results = Vec::new();
        let mut trained: Vec<Vec<Vec<Tensor>>> = Vec::new();
        for (arm, method) in &arms {
            let mut schedule = cfg.schedule.clone();
            schedule.method = match method {
                PruneMethod::Random { .. } => PruneMethod::Random { seed: derive_seed(seed, 1) },
                m => *m,
            };
            let mut model = build_model(&cfg.model, &splits, seed)?;
            let mut values = Vec::new();
            let mut trainer = |model: &mut Model, round: usize| -> Result<f64> {
                let mut opt = Optimizer::new(cfg.train.optimizer.clone());
                let scope = format!("{arm}/round{round}");
                let data = TrainData { train: &splits.train, val: splits.val.as_ref(), test: Some(&splits.test), context: None };
                let outcome = train(model, &mut opt, data, &cfg.train, derive_seed(seed, 100 + round as u64), &mut |m| {
                    record.push(epoch_event(seed, &scope, m))
                })?;
                values.push(model.values());
                outcome.test_accuracy().ok_or_else(|| Error::config("training ran zero epochs"))
            };
            let rounds = imp(&mut model, &mut trainer, &schedule)?;
            for r in &rounds {
                record.push(Event::Round {
                    seed,
                    arm: arm.clone(),
                    round: r.round,
                    density: r.density,
                    layer_density: r.mask.layers.iter().map(|l| l.density()).collect(),
                    test_accuracy: r.best_test_accuracy,
                })?;
            }
            results.push(ArmResult { arm: arm.clone(), rounds });
            trained.push(values);
        }
        let mut noise = Vec::new();
        if let Some(spec) = &cfg.noise {
            let mut models = Vec::new();
            for na in &spec.arms {
                let a = results
                    .iter()
                    .position(|r| r.arm == na.arm)
                    .ok_or_else(|| Error::config(format!("noise arm refers to unknown pruning arm {:?}", na.arm)))?;
                let i = nearest_round(&results[a].rounds, na.density).expect("imp records at least one round");
                let mut model = build_model(&cfg.model, &splits, seed)?;
                model.load_values(&trained[a][i])?;
                results[a].rounds[i].mask.apply(&mut model)?;
                models.push((na.label.clone(), model));
            }
            let refs: Vec<(&str, &Model)> = models.iter().map(|(l, m)| (l.as_str(), m)).collect();
            let noise_seed = derive_seed(seed, 2).wrapping_add(spec.seed);
            noise = noise_sweep(&refs, &splits.test, &spec.p_values, noise_seed, spec.mode, None, cfg.train.eval_batch)?;
            for row in &noise {
                record.push(Event::Noise { seed, model: row.model.clone(), p: row.p, accuracy: row.accuracy })?;
            }
        }
        out.push(SeedImp { seed, arms: results, noise });
    }
    Ok(out)
}

fn run_continual(
    cfg: &ContinualExperiment,
    seeds: &[u64],
    cache: &DataCache,
    record: &mut RunRecord,
) -> Result<Vec<(u64, Vec<TaskResult>)>> {
    let stream = cfg.stream.build(cache)?;
    let first = stream.tasks().first().ok_or_else(|| Error::config("empty task stream"))?.test()?;
    let input = first.sample_shape();
    let classes = first.classes;
    drop(first);
    let context = cfg.context.map(|kind| match kind {
        ContextKind::OneHot => ContextSpec::one_hot(stream.len()),
        ContextKind::Zeros => ContextSpec::zeros(stream.len()),
        ContextKind::TaskAverage => ContextSpec::task_average(stream.len(), input.iter().product()),
    });
    let model_spec = match &context {
        Some(c) => cfg.model.with_context_dim(c.dim()),
        None => cfg.model.clone(),
    };
    let arch = model_spec.resolve(&input, classes);
    let mut out = Vec::new();
    for &seed in seeds {
        let mut model = Model::build(&arch, seed)?;
        let results = {
            let record = Mutex::new(&mut *record);
            continual(
                &mut model,
                &stream,
                context.as_ref(),
                &cfg.train,
                derive_seed(seed, 3),
                &mut |t, m| record.lock().unwrap().push(epoch_event(seed, &format!("task{t}"), m)),
                &mut |r| {
                    record.lock().unwrap().push(Event::Task {
                        seed,
                        task: r.task,
                        latest: r.latest,
                        average: r.average,
                        accuracies: r.accuracies.clone(),
                    })
                },
            )?
        };
        if let Some(last) = results.last() {
            record.push(Event::Summary { seed, name: "final_average".into(), value: last.average })?;
        }
        out.push((seed, results));
    }
    Ok(out)
}

/// Template with a grid point's values substituted.
pub fn apply_point(template: &ExperimentConfig, p: &GridPoint) -> Result<ExperimentConfig> {
    let mut out = template.clone();
    let (train, model) = match &mut out {
        ExperimentConfig::Train(t) => (&mut t.train, &mut t.model),
        ExperimentConfig::Imp(i) => (&mut i.train, &mut i.model),
        ExperimentConfig::Continual(c) => (&mut c.train, &mut c.model),
        ExperimentConfig::Grid(_) => return Err(Error::config("a grid template cannot itself be a grid")),
    };
    train.optimizer.lr = p.lr;
    train.optimizer.weight_decay = p.weight_decay;
    train.batch_size = p.batch_size;
    if let Some(o) = model.options_mut() {
        o.conv_activation_density = p.conv_activation_density;
        o.ff_activation_density = p.ff_activation_density;
        o.ff_weight_density = p.ff_weight_density;
    }
    Ok(out)
}

/// Score of an outcome for ranking: mean over seeds of the selected test
/// accuracy, final-round accuracy, or final average task accuracy.
pub fn score(outcome: &Outcome) -> Option<f64> {
    let values: Vec<f64> = match outcome {
        Outcome::Train(v) => v.iter().filter_map(|(_, o)| o.test_accuracy()).collect(),
        Outcome::Imp(v) => v
            .iter()
            .filter_map(|s| s.arms.first().and_then(|a| a.rounds.last()).map(|r| r.best_test_accuracy))
            .collect(),
        Outcome::Continual(v) => v.iter().filter_map(|(_, r)| r.last().map(|t| t.average)).collect(),
        Outcome::Grid(g) => g.best_row().and_then(|r| r.score).into_iter().collect(),
    };
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn run_grid(cfg: &GridExperiment, master: u64, seeds: &[u64], cache: &DataCache, record: &mut RunRecord) -> Result<GridOutcome> {
    let per_point_seeds = seeds.len().max(1);
    grid_search(&cfg.grid, master, cfg.workers, Some(record), |p, point_seed| {
        let exp = Experiment {
            seeds: (0..per_point_seeds as u64).map(|i| derive_seed(point_seed, i)).collect(),
            experiment: apply_point(&cfg.template, p)?,
        };
        let mut scratch = exp.record(None)?;
        let outcome = run(&exp, cache, &mut scratch)?;
        score(&outcome).ok_or_else(|| Error::config("grid point produced no score"))
    })
}

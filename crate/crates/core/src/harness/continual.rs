//! Sequential task training with latest/average accuracy tracking.

use serde::{Deserialize, Serialize};

use super::train::{evaluate, train, EpochMetrics, TrainConfig, TrainData};
use crate::datasets::TaskStream;
use crate::dendrite::{make_context, ContextKind, ContextSpec};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::optimize::Optimizer;
use crate::tensor::Tensor;

/// Accuracies after finishing task `task`, all in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: usize,
    /// Accuracy on the task just trained.
    pub latest: f64,
    /// Mean of `accuracies`.
    pub average: f64,
    /// Accuracy on each of tasks `0..=task`.
    pub accuracies: Vec<f64>,
}

fn task_contexts(model: &Model, stream: &TaskStream, context: Option<&ContextSpec>) -> Result<Vec<Option<Tensor>>> {
    if !model.needs_context() {
        return Ok(vec![None; stream.len()]);
    }
    let spec = context.ok_or_else(|| Error::config("dendritic model needs a context spec"))?;
    if spec.num_tasks != stream.len() {
        return Err(Error::config(format!(
            "context is sized for {} tasks but the stream has {}",
            spec.num_tasks,
            stream.len()
        )));
    }
    if let Some(dim) = model.spec().context_dim {
        if dim != spec.dim() {
            return Err(Error::config(format!(
                "model expects context length {dim}, context spec gives {}",
                spec.dim()
            )));
        }
    }
    stream
        .tasks()
        .iter()
        .map(|t| {
            let data = match spec.kind {
                ContextKind::TaskAverage => Some(t.train()?),
                _ => None,
            };
            make_context(spec, t.id, data.as_ref()).map(Some)
        })
        .collect()
}

/// Train the tasks of `stream` in order, `cfg.epochs` epochs each.
///
/// Each task trains with its own fixed context vector and a fresh optimizer
/// state; after each task every task seen so far is evaluated with its own
/// context. `on_epoch` receives `(task, metrics)` and `on_task` each result.
pub fn continual(
    model: &mut Model,
    stream: &TaskStream,
    context: Option<&ContextSpec>,
    cfg: &TrainConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &EpochMetrics) -> Result<()>,
    on_task: &mut dyn FnMut(&TaskResult) -> Result<()>,
) -> Result<Vec<TaskResult>> {
    let contexts = task_contexts(model, stream, context)?;
    let mut results = Vec::with_capacity(stream.len());
    let mut optimizer = Optimizer::new(cfg.optimizer.clone());
    for (t, task) in stream.tasks().iter().enumerate() {
        let train_set = task.train()?;
        optimizer.reset();
        let task_seed = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
        train(
            model,
            &mut optimizer,
            TrainData { train: &train_set, val: None, test: None, context: contexts[t].as_ref() },
            cfg,
            task_seed,
            &mut |m| on_epoch(t, m),
        )?;
        drop(train_set);
        let mut accuracies = Vec::with_capacity(t + 1);
        for (prev, ctx) in stream.tasks()[..=t].iter().zip(&contexts) {
            accuracies.push(evaluate(model, &prev.test()?, ctx.as_ref(), cfg.eval_batch)?);
        }
        let result = TaskResult {
            task: t,
            latest: accuracies[t],
            average: accuracies.iter().sum::<f64>() / accuracies.len() as f64,
            accuracies,
        };
        on_task(&result)?;
        results.push(result);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{permuted_mnist, toy_blobs};
    use crate::nn::{ArchitectureSpec, DendriteOptions, PresetOptions};

    #[test]
    fn single_task_latest_equals_average() {
        let set = toy_blobs(200, 4, 0).unwrap();
        let stream = permuted_mnist(&set, &set, 1, 0, None).unwrap();
        let spec = ArchitectureSpec::fc("t", &[1, 1, 16], &[16], 4, &PresetOptions::default());
        let mut model = Model::build(&spec, 1).unwrap();
        let cfg = TrainConfig::adam(1, 20, 1e-2, 0.0);
        let out = continual(&mut model, &stream, None, &cfg, 0, &mut |_, _| Ok(()), &mut |_| Ok(())).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].latest, out[0].average);
    }

    #[test]
    fn context_count_mismatch_is_config_error() {
        let set = toy_blobs(40, 4, 0).unwrap();
        let stream = permuted_mnist(&set, &set, 3, 0, None).unwrap();
        let opts = PresetOptions {
            dendrites: Some(DendriteOptions { segments: 2, context_dim: 2 }),
            ..PresetOptions::default()
        };
        let spec = ArchitectureSpec::fc("t", &[1, 1, 16], &[8], 4, &opts);
        let mut model = Model::build(&spec, 1).unwrap();
        let cfg = TrainConfig::adam(1, 20, 1e-2, 0.0);
        let err = continual(&mut model, &stream, Some(&ContextSpec::one_hot(2)), &cfg, 0, &mut |_, _| Ok(()), &mut |_| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
        let err = continual(&mut model, &stream, None, &cfg, 0, &mut |_, _| Ok(()), &mut |_| Ok(()));
        assert!(matches!(err, Err(Error::Config(_))));
    }
}

//! SGD on adapter factors through the full materialization pipeline.

mod model;
mod task;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::adapter::AdapterState;
use crate::error::{Error, Result};
use crate::grouping::scatter;
use crate::rng::{derive_seed, stream, SeededStream};

pub use model::{
    backward, forward, logits, query_name, value_name, Batch, LayerWeights, ModelCache, ToyModel,
    ToyModelSpec,
};
pub use task::{Dataset, SyntheticTask, TaskSpec};

fn default_eval_interval() -> usize {
    50
}

fn default_check_tolerance() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Samples per step; the whole training set when at least its size.
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Finite-difference spot check every this many steps; 0 disables.
    #[serde(default)]
    pub grad_check_interval: usize,
    #[serde(default = "default_check_tolerance")]
    pub grad_check_tolerance: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_interval")]
    pub eval_interval: usize,
    /// Required `final_loss / initial_loss` upper bound, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convergence_ratio: Option<f64>,
    #[serde(default)]
    pub model: ToyModelSpec,
    #[serde(default)]
    pub task: TaskSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            learning_rate: 0.1,
            grad_check_interval: 0,
            grad_check_tolerance: default_check_tolerance(),
            seed: 0,
            eval_interval: default_eval_interval(),
            convergence_ratio: None,
            model: ToyModelSpec::default(),
            task: TaskSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::InvalidConfig(
                "steps, batch_size and eval_interval must be positive".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if let Some(r) = self.convergence_ratio {
            if r.is_nan() || r <= 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "convergence_ratio must be positive, got {r}"
                )));
            }
        }
        self.model.validate()
    }
}

/// One JSON-lines metrics record. `eval_acc` is null between evaluations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub loss: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<MetricRecord>,
    /// Full training-set loss before the first step.
    pub initial_loss: f64,
    /// Full training-set loss after the last step.
    pub final_loss: f64,
    pub final_eval_acc: f64,
}

impl TrainReport {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }

    pub fn write_metrics(&self, mut out: impl Write) -> Result<()> {
        for rec in &self.history {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Loss with the adapter's current deltas applied.
pub fn adapter_loss(state: &AdapterState, model: &ToyModel, batch: &Batch) -> Result<f64> {
    let (outs, _) = state.group_outputs()?;
    let deltas = scatter(&outs, state.plan(), state.manifest())?;
    Ok(forward(model, &deltas, batch)?.0)
}

/// Loss and its gradient with respect to every trainable scalar, in
/// [`AdapterState::params`] order.
pub fn loss_and_grads(
    state: &AdapterState,
    model: &ToyModel,
    batch: &Batch,
) -> Result<(f64, Vec<f64>)> {
    let (outs, adapter_cache) = state.group_outputs()?;
    let deltas = scatter(&outs, state.plan(), state.manifest())?;
    let (loss, cache) = forward(model, &deltas, batch)?;
    let delta_grads = backward(model, &cache);
    Ok((loss, state.backward(&delta_grads, &adapter_cache)?))
}

/// Fraction of samples whose highest score matches the label.
pub fn accuracy(state: &AdapterState, model: &ToyModel, batch: &Batch) -> Result<f64> {
    let (outs, _) = state.group_outputs()?;
    let deltas = scatter(&outs, state.plan(), state.manifest())?;
    let (_, cache) = forward(model, &deltas, batch)?;
    let hits = cache
        .probs()
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &label)| row.iter().all(|&p| p <= row[label]))
        .count();
    Ok(hits as f64 / batch.len() as f64)
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference derivative of the loss along parameter `index`.
pub fn finite_difference(
    state: &AdapterState,
    model: &ToyModel,
    batch: &Batch,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let mut probe = state.clone();
    let mut params = state.params();
    let orig = params[index];
    params[index] = orig + eps;
    probe.set_params(&params)?;
    let plus = adapter_loss(&probe, model, batch)?;
    params[index] = orig - eps;
    probe.set_params(&params)?;
    let minus = adapter_loss(&probe, model, batch)?;
    Ok((plus - minus) / (2.0 * eps))
}

const CHECK_COORDS: usize = 4;
const CHECK_EPS: f64 = 1e-5;
const CHECK_FLOOR: f64 = 1e-6;

/// Runs plain SGD on the adapter factors against the target task.
pub fn train(
    state: &mut AdapterState,
    model: &ToyModel,
    task: &SyntheticTask,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    let frozen = model.checksum();
    let projections = state.projections().to_vec();
    let data = &task.target;
    let n = data.train.len();
    let mut batches = SeededStream::new(cfg.seed, stream::BATCH);
    let mut checks = SeededStream::new(derive_seed(cfg.seed, 1), stream::BATCH);

    let initial_loss = adapter_loss(state, model, &data.train)?;
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = if cfg.batch_size >= n {
            data.train.clone()
        } else {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| batches.below(n)).collect();
            data.train.select(&idx)
        };
        let (loss, grads) = loss_and_grads(state, model, &batch)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss });
        }
        if cfg.grad_check_interval > 0 && step % cfg.grad_check_interval == 0 {
            for _ in 0..CHECK_COORDS {
                let i = checks.below(grads.len());
                let fd = finite_difference(state, model, &batch, i, CHECK_EPS)?;
                let err = relative_error(grads[i], fd, CHECK_FLOOR);
                if err > cfg.grad_check_tolerance {
                    return Err(Error::Numerical(format!(
                        "gradient check failed at step {step}, parameter {i}: analytic {} vs numeric {fd}",
                        grads[i]
                    )));
                }
            }
        }
        let eval_acc = if step % cfg.eval_interval == 0 || step + 1 == cfg.steps {
            Some(accuracy(state, model, &data.eval)?)
        } else {
            None
        };
        history.push(MetricRecord {
            step,
            loss,
            eval_acc,
        });
        if cfg.learning_rate > 0.0 {
            state.axpy(-cfg.learning_rate, &grads)?;
        }
    }
    let final_loss = adapter_loss(state, model, &data.train)?;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    let final_eval_acc = accuracy(state, model, &data.eval)?;
    if model.checksum() != frozen || state.projections() != projections.as_slice() {
        return Err(Error::Numerical(
            "frozen weights changed during training".into(),
        ));
    }
    Ok(TrainReport {
        history,
        initial_loss,
        final_loss,
        final_eval_acc,
    })
}

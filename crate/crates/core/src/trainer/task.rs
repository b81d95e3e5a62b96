//! Teacher-labelled token classification tasks.
//!
//! The source teacher is the frozen model itself. The target teacher adds a
//! fixed random rank-`teacher_rank` perturbation to every query and value
//! weight, so adapting those weights can recover it.

use serde::{Deserialize, Serialize};

use super::model::{logits, Batch, ToyModel};
use crate::adapter::NamedTensors;
use crate::error::{Error, Result};
use crate::rng::{stream, SeededStream};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub train_samples: usize,
    pub eval_samples: usize,
    pub teacher_rank: usize,
    /// Spectral size of the teacher perturbation relative to `init_scale`.
    pub teacher_scale: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            train_samples: 64,
            eval_samples: 64,
            teacher_rank: 2,
            teacher_scale: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Batch,
    pub eval: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub source: Dataset,
    pub target: Dataset,
    teacher_deltas: NamedTensors,
}

fn argmax_labels(
    model: &ToyModel,
    deltas: &[(String, DenseTensor)],
    tokens: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let probe = Batch {
        tokens: tokens.to_vec(),
        labels: vec![0; tokens.len()],
    };
    let scores = logits(model, deltas, &probe)?;
    Ok(scores
        .rows()
        .into_iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |a, (i, &v)| if v > a.1 { (i, v) } else { a },
                )
                .0
        })
        .collect())
}

impl SyntheticTask {
    pub fn new(model: &ToyModel, spec: &TaskSpec, seed: u64) -> Result<Self> {
        if spec.train_samples == 0 || spec.eval_samples == 0 || spec.teacher_rank == 0 {
            return Err(Error::InvalidConfig(format!(
                "task sizes must be positive: {spec:?}"
            )));
        }
        if !(spec.teacher_scale > 0.0 && spec.teacher_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "teacher_scale must be positive, got {}",
                spec.teacher_scale
            )));
        }
        let ms = model.spec();
        let mut rng = SeededStream::new(seed, stream::TASK);
        let d = ms.width;
        let r = spec.teacher_rank;
        let amp = spec.teacher_scale * ms.init_scale / d as f64;
        let teacher_deltas = model
            .manifest()
            .entries()
            .iter()
            .map(|e| {
                let u: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
                let v: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
                let mut data = vec![0.0; d * d];
                for i in 0..d {
                    for j in 0..d {
                        data[i * d + j] =
                            amp * (0..r).map(|k| u[i * r + k] * v[j * r + k]).sum::<f64>();
                    }
                }
                (
                    e.name.clone(),
                    DenseTensor::from_dims(&[d, d], data).expect("square"),
                )
            })
            .collect::<NamedTensors>();

        let mut sequences = |count: usize| -> Vec<Vec<usize>> {
            (0..count)
                .map(|_| (0..ms.seq_len).map(|_| rng.below(ms.vocab)).collect())
                .collect()
        };
        let train_tokens = sequences(spec.train_samples);
        let eval_tokens = sequences(spec.eval_samples);

        let zero = model.zero_deltas();
        let label = |deltas: &NamedTensors, tokens: &[Vec<usize>]| -> Result<Batch> {
            Ok(Batch {
                tokens: tokens.to_vec(),
                labels: argmax_labels(model, deltas, tokens)?,
            })
        };
        Ok(Self {
            source: Dataset {
                train: label(&zero, &train_tokens)?,
                eval: label(&zero, &eval_tokens)?,
            },
            target: Dataset {
                train: label(&teacher_deltas, &train_tokens)?,
                eval: label(&teacher_deltas, &eval_tokens)?,
            },
            teacher_deltas,
        })
    }

    /// Query/value perturbation defining the target teacher.
    pub fn teacher_deltas(&self) -> &NamedTensors {
        &self.teacher_deltas
    }
}

//! Desk-scale experiments: synthetic tasks, metrics, compression sweeps, the
//! calibration-size ablation and overhead accounting.

mod overhead;
mod sweep;
mod task;

pub use overhead::{gram_bytes, measure_overhead, solver_bytes, OverheadReport, StageCost};
pub use sweep::{
    calib_ablation, fmt_sig9, run_sweep, AblationConfig, AblationPoint, AblationReport, SweepConfig, SweepReport,
    SweepRow, SWEEP_HEADER,
};
pub use task::{instance_seed, instantiate, ModelFamily, ModelSpec, SyntheticTask, TaskInstance, TaskKind};

use crate::error::{GrailError, Result};
use crate::model::BlockGraph;
use crate::tensor::Tensor;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of argmax predictions matching the label.
    Accuracy,
    /// `‖prediction − target‖_F / ‖target‖_F`.
    RelativeError,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::RelativeError => "relative_error",
        }
    }

    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Accuracy)
    }

    /// Gain of `after` over `before`, positive when `after` is better.
    pub fn improvement(self, before: f64, after: f64) -> f64 {
        if self.higher_is_better() {
            after - before
        } else {
            before - after
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Labels(Vec<usize>),
    Values(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub targets: Targets,
}

impl Dataset {
    /// Labels come as a rank-1 tensor of class indices; anything else is a
    /// regression target batch.
    pub fn from_tensors(inputs: Tensor, targets: Tensor) -> Result<Self> {
        let n = inputs.shape()[0];
        if targets.shape()[0] != n {
            return Err(GrailError::shape("dataset", inputs.shape(), targets.shape()));
        }
        let targets = if targets.rank() == 1 {
            let labels = targets
                .data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(GrailError::InvalidTensor(format!("label {v} is not a class index")))
                    }
                })
                .collect::<Result<_>>()?;
            Targets::Labels(labels)
        } else {
            Targets::Values(targets)
        };
        Ok(Self { inputs, targets })
    }

    pub fn metric(&self) -> Metric {
        match self.targets {
            Targets::Labels(_) => Metric::Accuracy,
            Targets::Values(_) => Metric::RelativeError,
        }
    }
}

pub fn relative_error(prediction: &Tensor, target: &Tensor) -> Result<f64> {
    let diff = prediction.sub(target)?.frobenius();
    let norm = target.frobenius();
    if norm == 0.0 {
        return Err(GrailError::DegenerateStats("target batch is all zeros".into()));
    }
    Ok(diff / norm)
}

/// Argmax accuracy over the rows of `logits`; ties go to the lower class.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let logits = logits.flatten_rows();
    if logits.rows() != labels.len() {
        return Err(GrailError::shape("accuracy", logits.shape(), &[labels.len()]));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| {
            let row = logits.row(i);
            let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            best == l
        })
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(graph: &BlockGraph, data: &Dataset) -> Result<f64> {
    let out = graph.forward(&data.inputs, None)?.output;
    match &data.targets {
        Targets::Labels(l) => accuracy(&out, l),
        Targets::Values(t) => relative_error(&out, t),
    }
}

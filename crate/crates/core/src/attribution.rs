//! Integrated Gradients over scalar model outputs.
//!
//! The path integral is approximated with the midpoint rule
//! `IG = (x − x') ⊙ (1/m) Σ_k ∇F(x' + ((k − ½)/m)(x − x'))`. Gradient
//! evaluations run in parallel and are summed in index order, so results do
//! not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{format_sig9, ScenarioDataset};
use crate::model::{Mode, Model, ModelError, SpatialContext};
use crate::tensor::{Tape, Tensor, TensorError};
use crate::training::{batch, window_count, Normalizer, TrainError};

#[derive(Debug, Error)]
pub enum AttributionError {
    #[error("integration steps must be >= 1")]
    Steps,
    #[error("input shape {got:?} differs from baseline {baseline:?}")]
    Shape { got: Vec<usize>, baseline: Vec<usize> },
    #[error("target {0} does not select a single output entry")]
    Target(String),
    #[error("scenario has no windows to attribute")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Which scalar of the `H'×N` forecast is explained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Entry { node: usize, step: usize },
    NetworkMean,
}

impl std::fmt::Display for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Target::Entry { node, step } => write!(f, "node {node} step {step}"),
            Target::NetworkMean => f.write_str("network mean"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Zeros,
    TrainMean,
}

/// A differentiable scalar function of an `H×N` input.
pub trait ScalarFunction: Sync {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError>;
}

/// `F(x) = Σ w_i x_i + c`.
pub struct Linear {
    pub weights: Tensor,
    pub offset: f64,
}

impl ScalarFunction for Linear {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError> {
        if x.shape() != self.weights.shape() {
            return Err(AttributionError::Shape {
                got: x.shape().to_vec(),
                baseline: self.weights.shape().to_vec(),
            });
        }
        let v: f64 = x.data().iter().zip(self.weights.data()).map(|(a, b)| a * b).sum();
        Ok((v + self.offset, self.weights.clone()))
    }
}

/// A model forecast on raw flows: the input is normalized inside, the
/// selected output is reported on the raw scale.
pub struct ModelOutput<'a> {
    pub model: &'a Model,
    pub ctx: &'a SpatialContext,
    pub normalizer: Normalizer,
    pub target: Target,
}

impl<'a> ModelOutput<'a> {
    pub fn new(model: &'a Model, ctx: &'a SpatialContext, normalizer: Normalizer, target: Target) -> Result<Self, AttributionError> {
        let c = model.config();
        if let Target::Entry { node, step } = target {
            if node >= c.num_nodes || step >= c.horizon {
                return Err(AttributionError::Target(target.to_string()));
            }
        }
        model.check_graph(ctx)?;
        Ok(Self {
            model,
            ctx,
            normalizer,
            target,
        })
    }
}

impl ScalarFunction for ModelOutput<'_> {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError> {
        let c = self.model.config();
        let (mu, sigma) = (self.normalizer.mean, self.normalizer.std);
        let tape = Tape::new();
        let vars = self.model.params().register(&tape, false);
        let input = tape.leaf(x.clone());
        let normalized = input
            .scale(1.0 / sigma)
            .add(&tape.constant(Tensor::scalar(-mu / sigma)))?
            .reshape(&[1, c.history, c.num_nodes])?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pred = self
            .model
            .forward(&vars, &normalized, self.ctx, Mode::Eval, &mut rng)?
            .prediction
            .scale(sigma)
            .add(&tape.constant(Tensor::scalar(mu)))?;
        let out = match self.target {
            Target::Entry { node, step } => pred.narrow(1, step, 1)?.narrow(2, node, 1)?.sum(),
            Target::NetworkMean => pred.mean(),
        };
        let value = out.item();
        let grads = tape.backward(out)?;
        Ok((value, grads.wrt(&input)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionMap {
    pub target: Target,
    pub baseline_kind: Option<BaselineKind>,
    pub steps: usize,
    /// Same shape as the input window.
    pub values: Tensor,
    pub f_input: f64,
    pub f_baseline: f64,
    pub completeness_gap: f64,
}

/// Raw IG values (no target or baseline metadata).
pub fn integrated_gradients_raw(
    f: &dyn ScalarFunction,
    x: &Tensor,
    baseline: &Tensor,
    steps: usize,
) -> Result<(Tensor, f64, f64), AttributionError> {
    if steps == 0 {
        return Err(AttributionError::Steps);
    }
    if x.shape() != baseline.shape() {
        return Err(AttributionError::Shape {
            got: x.shape().to_vec(),
            baseline: baseline.shape().to_vec(),
        });
    }
    let delta: Vec<f64> = x.data().iter().zip(baseline.data()).map(|(a, b)| a - b).collect();
    let grads = (0..steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 + 0.5) / steps as f64;
            let point: Vec<f64> = baseline.data().iter().zip(&delta).map(|(b, d)| b + alpha * d).collect();
            let point = Tensor::new(x.shape().to_vec(), point).expect("same shape");
            f.value_and_grad(&point).map(|(_, g)| g)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut sum = vec![0.0; x.len()];
    for g in &grads {
        for (s, v) in sum.iter_mut().zip(g.data()) {
            *s += v;
        }
    }
    let values: Vec<f64> = sum
        .iter()
        .zip(&delta)
        .map(|(s, d)| if *d == 0.0 { 0.0 } else { d * s / steps as f64 })
        .collect();
    let (f_x, _) = f.value_and_grad(x)?;
    let (f_b, _) = f.value_and_grad(baseline)?;
    Ok((Tensor::new(x.shape().to_vec(), values)?, f_x, f_b))
}

pub fn integrated_gradients(
    f: &dyn ScalarFunction,
    target: Target,
    x: &Tensor,
    baseline: &Tensor,
    baseline_kind: Option<BaselineKind>,
    steps: usize,
) -> Result<AttributionMap, AttributionError> {
    let (values, f_input, f_baseline) = integrated_gradients_raw(f, x, baseline, steps)?;
    let completeness_gap = (values.sum() - (f_input - f_baseline)).abs();
    Ok(AttributionMap {
        target,
        baseline_kind,
        steps,
        values,
        f_input,
        f_baseline,
        completeness_gap,
    })
}

pub fn baseline_for(kind: BaselineKind, normalizer: &Normalizer, shape: &[usize]) -> Tensor {
    match kind {
        BaselineKind::Zeros => Tensor::zeros(shape),
        BaselineKind::TrainMean => Tensor::full(shape, normalizer.mean),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadImportance {
    pub scenario: String,
    pub target: Target,
    pub baseline_kind: BaselineKind,
    pub steps: usize,
    pub windows: Vec<usize>,
    /// Mean `|IG|` per node before max-normalization.
    pub raw: Vec<f64>,
    /// `raw / max(raw)`; all zero when the model ignores its input.
    pub importance: Vec<f64>,
    /// Largest gap over the sampled windows.
    pub completeness_gap: f64,
    /// Largest `|F(x) − F(x')|` over the sampled windows.
    pub output_delta: f64,
}

/// Evenly spaced window starts, at most `max_windows`.
pub fn sample_windows(count: usize, max_windows: usize) -> Vec<usize> {
    if count == 0 || max_windows == 0 {
        return Vec::new();
    }
    let k = max_windows.min(count);
    if k == 1 {
        return vec![count - 1];
    }
    (0..k).map(|i| i * (count - 1) / (k - 1)).collect()
}

/// Mean `|IG|` per node over sampled windows of the scenario, target
/// "network mean", normalized to `[0, 1]` by its maximum.
pub fn road_importance(
    model: &Model,
    normalizer: &Normalizer,
    scenario: &ScenarioDataset,
    baseline_kind: BaselineKind,
    steps: usize,
    max_windows: usize,
) -> Result<RoadImportance, AttributionError> {
    let c = model.config();
    let (h, n) = (c.history, c.num_nodes);
    let count = window_count(scenario.num_steps(), h, c.horizon).map_err(|_| AttributionError::Empty)?;
    let windows = sample_windows(count, max_windows);
    if windows.is_empty() {
        return Err(AttributionError::Empty);
    }
    let ctx = SpatialContext::new(&scenario.graph, c.weighted_adjacency);
    let f = ModelOutput::new(model, &ctx, *normalizer, Target::NetworkMean)?;
    // NaN observations fall back to the training mean.
    let filled = scenario.series.map(|v| if v.is_nan() { normalizer.mean } else { v });
    let baseline = baseline_for(baseline_kind, normalizer, &[h, n]);
    let mut raw = vec![0.0; n];
    let (mut gap, mut delta) = (0.0f64, 0.0f64);
    for &w in &windows {
        let (x, _) = batch(&filled, &[w], h, c.horizon, false);
        let x = x.reshape(&[h, n])?;
        let map = integrated_gradients(&f, Target::NetworkMean, &x, &baseline, Some(baseline_kind), steps)?;
        for (i, v) in map.values.data().iter().enumerate() {
            raw[i % n] += v.abs();
        }
        gap = gap.max(map.completeness_gap);
        delta = delta.max((map.f_input - map.f_baseline).abs());
    }
    let denom = (windows.len() * h) as f64;
    raw.iter_mut().for_each(|v| *v /= denom);
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let importance = raw.iter().map(|v| if max > 0.0 { v / max } else { 0.0 }).collect();
    Ok(RoadImportance {
        scenario: scenario.id.clone(),
        target: Target::NetworkMean,
        baseline_kind,
        steps,
        windows,
        raw,
        importance,
        completeness_gap: gap,
        output_delta: delta,
    })
}

#[derive(Serialize)]
struct Sidecar<'a> {
    scenario: &'a str,
    target: Target,
    baseline_kind: BaselineKind,
    m: usize,
    completeness_gap: f64,
    output_delta: f64,
    windows: &'a [usize],
}

/// `importance.csv` (node_id, importance) and `importance.json` sidecar.
pub fn write_importance(imp: &RoadImportance, dir: &Path) -> Result<(), AttributionError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| AttributionError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut csv = String::from("node_id,importance\n");
    for (i, v) in imp.importance.iter().enumerate() {
        writeln!(csv, "{i},{}", format_sig9(*v)).expect("write to string");
    }
    let csv_path = dir.join("importance.csv");
    fs::write(&csv_path, csv).map_err(io(&csv_path))?;
    let sidecar = Sidecar {
        scenario: &imp.scenario,
        target: imp.target,
        baseline_kind: imp.baseline_kind,
        m: imp.steps,
        completeness_gap: imp.completeness_gap,
        output_delta: imp.output_delta,
        windows: &imp.windows,
    };
    let json_path = dir.join("importance.json");
    let mut text = serde_json::to_string_pretty(&sidecar).expect("serializes");
    text.push('\n');
    fs::write(&json_path, text).map_err(io(&json_path))?;
    Ok(())
}

#[cfg(test)]
mod tests;

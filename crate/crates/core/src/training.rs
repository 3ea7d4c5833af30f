//! Windowing, losses, z-score normalization, splits, Adam and the fit loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{Corpus, ScenarioDataset, SplitHint};
use crate::metrics::{report_with_nodes, MetricReport, MetricsError};
use crate::model::{Mode, Model, ModelError, ModelParams, SpatialContext};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("series has {steps} steps; need at least {required} (history {history} + horizon {horizon})")]
    SeriesTooShort {
        steps: usize,
        required: usize,
        history: usize,
        horizon: usize,
    },
    #[error("loss shapes differ: prediction {pred:?}, target {target:?}")]
    LossShape { pred: Vec<usize>, target: Vec<usize> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("invalid split: {0}")]
    Split(String),
    #[error("NaN gradient for parameter `{path}`")]
    NanGradient { path: String },
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged {
        epoch: usize,
        loss: f64,
        /// Parameters from the best epoch before divergence.
        last_good: Box<Model>,
    },
    #[error("corpus has {corpus} nodes, model expects {model}")]
    NodeMismatch { corpus: usize, model: usize },
    #[error("no usable windows in the {0} split")]
    NoWindows(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("writing history: {0}")]
    History(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "MAE")]
    Mae,
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "smoothed_L1")]
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Zscore,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub normalization: Normalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_kind: LossKind::Mae,
            learning_rate: 5e-4,
            weight_decay: 0.1,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            normalization: Normalization::Zscore,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Index pairs of all sliding windows: input `[w, w+H)`, target `[w+H, w+H+H')`.
pub fn window_count(steps: usize, history: usize, horizon: usize) -> Result<usize, TrainError> {
    let required = history + horizon;
    if steps < required {
        return Err(TrainError::SeriesTooShort {
            steps,
            required,
            history,
            horizon,
        });
    }
    Ok(steps - required + 1)
}

/// All stride-1 `(H×N input, H'×N target)` pairs in chronological order.
pub fn make_windows(series: &Tensor, history: usize, horizon: usize) -> Result<Vec<(Tensor, Tensor)>, TrainError> {
    let (t, n) = (series.shape()[0], series.shape()[1]);
    let count = window_count(t, history, horizon)?;
    let slice = |start: usize, len: usize| {
        Tensor::new(vec![len, n], series.data()[start * n..(start + len) * n].to_vec()).expect("in range")
    };
    Ok((0..count)
        .map(|w| (slice(w, history), slice(w + history, horizon)))
        .collect())
}

pub fn loss<'t>(pred: &Var<'t>, target: &Var<'t>, kind: LossKind) -> Result<Var<'t>, TrainError> {
    if pred.shape() != target.shape() {
        return Err(TrainError::LossShape {
            pred: pred.shape(),
            target: target.shape(),
        });
    }
    let diff = pred.sub(target)?;
    Ok(match kind {
        LossKind::Mae => diff.abs().mean(),
        LossKind::Mse => diff.square().mean(),
        LossKind::SmoothL1 => diff.smooth_l1().mean(),
    })
}

/// Global scalar z-score statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }

    /// Statistics over the non-NaN values; a constant input gets `std = 1`.
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        for &v in values.into_iter().filter(|v| !v.is_nan()) {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return Self::identity();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let std = var.sqrt();
        Self {
            mean,
            std: if std > 1e-8 { std } else { 1.0 },
        }
    }

    pub fn normalize(&self, x: &Tensor) -> Tensor {
        x.map(|v| (v - self.mean) / self.std)
    }

    pub fn denormalize(&self, x: &Tensor) -> Tensor {
        x.map(|v| v * self.std + self.mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    ScenarioDisjoint,
    Chronological,
}

/// Which scenarios and time ranges feed training, validation and test.
///
/// Scenario-disjoint: train/test ids come from the lists or the manifest
/// hints; validation is the chronological tail (`val_fraction`) of each
/// training scenario's windows unless `val_ids` is given.
/// Chronological: each listed scenario (default: all) is cut in time into
/// train, val (`val_fraction`) and test (`test_fraction`) windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train_ids: Option<Vec<String>>,
    pub val_ids: Option<Vec<String>>,
    pub test_ids: Option<Vec<String>>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::ScenarioDisjoint,
            train_ids: None,
            val_ids: None,
            test_ids: None,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

/// Contiguous window indices `[start, end)` of one scenario.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub scenario: String,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResolvedSplit {
    pub train: Vec<Segment>,
    pub val: Vec<Segment>,
    pub test: Vec<Segment>,
}

impl ResolvedSplit {
    pub fn part(&self, name: &str) -> Option<&[Segment]> {
        match name {
            "train" => Some(&self.train),
            "val" => Some(&self.val),
            "test" => Some(&self.test),
            _ => None,
        }
    }

    fn ids(segments: &[Segment]) -> std::collections::BTreeSet<&str> {
        segments.iter().map(|s| s.scenario.as_str()).collect()
    }
}

fn fraction_cut(count: usize, fraction: f64) -> usize {
    ((count as f64) * fraction).round() as usize
}

impl SplitSpec {
    pub fn resolve(&self, corpus: &Corpus, history: usize, horizon: usize) -> Result<ResolvedSplit, TrainError> {
        if !(0.0..1.0).contains(&self.val_fraction) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(TrainError::Split("fractions must lie in [0, 1)".into()));
        }
        let lookup = |ids: &Option<Vec<String>>, hint: Option<SplitHint>| -> Result<Vec<&ScenarioDataset>, TrainError> {
            match ids {
                Some(ids) => ids
                    .iter()
                    .map(|id| {
                        corpus
                            .scenario(id)
                            .ok_or_else(|| TrainError::Split(format!("unknown scenario `{id}`")))
                    })
                    .collect(),
                None => Ok(match hint {
                    Some(h) => corpus.with_hint(h).collect(),
                    None => corpus.scenarios.iter().collect(),
                }),
            }
        };
        let whole = |s: &ScenarioDataset| -> Result<Segment, TrainError> {
            Ok(Segment {
                scenario: s.id.clone(),
                start: 0,
                end: window_count(s.num_steps(), history, horizon)?,
            })
        };
        let mut out = ResolvedSplit::default();
        match self.mode {
            SplitMode::ScenarioDisjoint => {
                let train = lookup(&self.train_ids, Some(SplitHint::Train))?;
                let test = lookup(&self.test_ids, Some(SplitHint::Test))?;
                let val = match &self.val_ids {
                    Some(_) => Some(lookup(&self.val_ids, None)?),
                    None => None,
                };
                for s in &train {
                    let seg = whole(s)?;
                    if val.is_none() {
                        let cut = seg.end - fraction_cut(seg.end, self.val_fraction);
                        out.train.push(Segment { end: cut, ..seg.clone() });
                        out.val.push(Segment { start: cut, ..seg });
                    } else {
                        out.train.push(seg);
                    }
                }
                for s in val.iter().flatten() {
                    out.val.push(whole(s)?);
                }
                for s in &test {
                    out.test.push(whole(s)?);
                }
                let train_ids = ResolvedSplit::ids(&out.train);
                let test_ids = ResolvedSplit::ids(&out.test);
                if let Some(id) = train_ids.intersection(&test_ids).next() {
                    return Err(TrainError::Split(format!("scenario `{id}` is in both train and test")));
                }
                if val.is_some() {
                    let val_ids = ResolvedSplit::ids(&out.val);
                    if let Some(id) = val_ids.iter().find(|id| train_ids.contains(*id) || test_ids.contains(*id)) {
                        return Err(TrainError::Split(format!("validation scenario `{id}` overlaps train/test")));
                    }
                }
            }
            SplitMode::Chronological => {
                for s in lookup(&self.train_ids, None)? {
                    let seg = whole(s)?;
                    let test_cut = seg.end - fraction_cut(seg.end, self.test_fraction);
                    let val_cut = test_cut - fraction_cut(seg.end, self.val_fraction).min(test_cut);
                    out.train.push(Segment { end: val_cut, ..seg.clone() });
                    out.val.push(Segment {
                        start: val_cut,
                        end: test_cut,
                        ..seg.clone()
                    });
                    out.test.push(Segment { start: test_cut, ..seg });
                }
            }
        }
        out.train.retain(|s| !s.is_empty());
        out.val.retain(|s| !s.is_empty());
        out.test.retain(|s| !s.is_empty());
        if out.train.is_empty() {
            return Err(TrainError::Split("no training scenario".into()));
        }
        Ok(out)
    }
}

/// Adam moment buffers keyed by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One Adam update with decoupled weight decay. Nothing is modified when any
/// gradient holds a NaN.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    for (path, g) in grads {
        if g.data().iter().any(|v| v.is_nan()) {
            return Err(TrainError::NanGradient { path: path.clone() });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (path, p) in params.iter_mut() {
        let Some(g) = grads.get(path) else { continue };
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; p.len()]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; p.len()]);
        for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w -= lr * weight_decay * *w;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            *w -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Repeats the last observed step `horizon` times: `B×H×N → B×H'×N`.
pub fn persistence_baseline(input: &Tensor, horizon: usize) -> Tensor {
    let s = input.shape();
    let (b, h, n) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * horizon * n);
    for i in 0..b {
        let last = &input.data()[(i * h + h - 1) * n..(i * h + h) * n];
        for _ in 0..horizon {
            out.extend_from_slice(last);
        }
    }
    Tensor::new(vec![b, horizon, n], out).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `null` in JSON when there is no validation data.
    pub val_loss: Option<f64>,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub normalizer: Normalizer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// Normalized series and graph context of one scenario.
pub struct Prepared {
    pub id: String,
    pub series: Tensor,
    pub ctx: SpatialContext,
}

pub fn prepare(corpus: &Corpus, model: &Model, normalizer: &Normalizer) -> Result<Vec<Prepared>, TrainError> {
    let weighted = model.config().weighted_adjacency;
    corpus
        .scenarios
        .iter()
        .map(|s| {
            if s.num_nodes() != model.config().num_nodes {
                return Err(TrainError::NodeMismatch {
                    corpus: s.num_nodes(),
                    model: model.config().num_nodes,
                });
            }
            let ctx = SpatialContext::new(&s.graph, weighted);
            model.check_graph(&ctx)?;
            Ok(Prepared {
                id: s.id.clone(),
                series: normalizer.normalize(&s.series),
                ctx,
            })
        })
        .collect()
}

/// Training statistics come from the time steps touched by training windows.
pub fn fit_normalizer(corpus: &Corpus, train: &[Segment], history: usize, horizon: usize, kind: Normalization) -> Normalizer {
    if kind == Normalization::None {
        return Normalizer::identity();
    }
    let mut values = Vec::new();
    for seg in train {
        let s = corpus.scenario(&seg.scenario).expect("resolved segment");
        let n = s.num_nodes();
        let last_step = seg.end - 1 + history + horizon;
        values.extend_from_slice(&s.series.data()[seg.start * n..last_step * n]);
    }
    Normalizer::fit(&values)
}

/// Stacks windows `starts` of a `T×N` series into `B×H×N` / `B×H'×N`.
/// With `fill_nan`, NaN inputs become 0 (the normalized training mean).
pub fn batch(series: &Tensor, starts: &[usize], history: usize, horizon: usize, fill_nan: bool) -> (Tensor, Tensor) {
    let n = series.shape()[1];
    let data = series.data();
    let mut x = Vec::with_capacity(starts.len() * history * n);
    let mut y = Vec::with_capacity(starts.len() * horizon * n);
    for &w in starts {
        x.extend(data[w * n..(w + history) * n].iter().map(|&v| if fill_nan && v.is_nan() { 0.0 } else { v }));
        y.extend_from_slice(&data[(w + history) * n..(w + history + horizon) * n]);
    }
    (
        Tensor::new(vec![starts.len(), history, n], x).expect("shape"),
        Tensor::new(vec![starts.len(), horizon, n], y).expect("shape"),
    )
}

fn window_is_clean(p: &Prepared, w: usize, history: usize, horizon: usize) -> bool {
    let n = p.series.shape()[1];
    !p.series.data()[w * n..(w + history + horizon) * n].iter().any(|v| v.is_nan())
}

/// Clean window starts per prepared-scenario index.
fn clean_windows(prepared: &[Prepared], segments: &[Segment], history: usize, horizon: usize) -> Vec<(usize, Vec<usize>)> {
    segments
        .iter()
        .filter_map(|seg| {
            let i = prepared.iter().position(|p| p.id == seg.scenario)?;
            let starts: Vec<usize> = (seg.start..seg.end)
                .filter(|&w| window_is_clean(&prepared[i], w, history, horizon))
                .collect();
            (!starts.is_empty()).then_some((i, starts))
        })
        .collect()
}

fn gradient_map(vars: &BTreeMap<String, Var<'_>>, grads: &crate::tensor::Gradients) -> BTreeMap<String, Tensor> {
    vars.iter().map(|(k, v)| (k.clone(), grads.wrt(v))).collect()
}

/// Mean loss (normalized scale) over the windows, eval mode.
fn evaluate_loss(
    model: &Model,
    prepared: &[Prepared],
    windows: &[(usize, Vec<usize>)],
    cfg: &TrainConfig,
) -> Result<Option<f64>, TrainError> {
    let (h, hp) = (model.config().history, model.config().horizon);
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, starts) in windows {
        for chunk in starts.chunks(cfg.batch_size.max(64)) {
            let (x, y) = batch(&prepared[*i].series, chunk, h, hp, false);
            let pred = model.predict(&x, &prepared[*i].ctx)?;
            let tape = Tape::new();
            let l = loss(&tape.constant(pred), &tape.constant(y), cfg.loss_kind)?.item();
            total += l * chunk.len() as f64;
            count += chunk.len();
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Trains `model` on the split's training windows and returns the
/// best-validation parameters. One JSON line per epoch goes to `history_out`.
pub fn fit(
    mut model: Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    split: &ResolvedSplit,
    mut history_out: Option<&mut dyn Write>,
) -> Result<TrainedModel, TrainError> {
    cfg.validate()?;
    let (h, hp) = (model.config().history, model.config().horizon);
    let normalizer = fit_normalizer(corpus, &split.train, h, hp, cfg.normalization);
    let prepared = prepare(corpus, &model, &normalizer)?;
    let train = clean_windows(&prepared, &split.train, h, hp);
    if train.is_empty() {
        return Err(TrainError::NoWindows("train"));
    }
    let val = clean_windows(&prepared, &split.val, h, hp);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(1);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let started = Instant::now();

    for epoch in 1..=cfg.epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, starts) in &train {
            let mut starts = starts.clone();
            starts.shuffle(&mut rng);
            batches.extend(starts.chunks(cfg.batch_size).map(|c| (*i, c.to_vec())));
        }
        batches.shuffle(&mut rng);

        let (mut sum, mut seen) = (0.0, 0usize);
        for (i, starts) in &batches {
            let p = &prepared[*i];
            let (x, y) = batch(&p.series, starts, h, hp, false);
            let tape = Tape::new();
            let vars = model.params().register(&tape, true);
            let fwd = model.forward(&vars, &tape.constant(x), &p.ctx, Mode::Train, &mut dropout_rng)?;
            let l = loss(&fwd.prediction, &tape.constant(y), cfg.loss_kind)?;
            let value = l.item();
            let diverged = |loss: f64, best: &Option<(f64, usize, ModelParams)>, model: &Model| {
                let mut last_good = model.clone();
                if let Some((_, _, params)) = best {
                    *last_good.params_mut() = params.clone();
                }
                TrainError::Diverged {
                    epoch,
                    loss,
                    last_good: Box::new(last_good),
                }
            };
            if !value.is_finite() {
                return Err(diverged(value, &best, &model));
            }
            let grads = gradient_map(&vars, &tape.backward(l)?);
            drop(vars);
            match adam_step(model.params_mut(), &grads, &mut adam, cfg.learning_rate, cfg.weight_decay) {
                Err(TrainError::NanGradient { .. }) => return Err(diverged(f64::NAN, &best, &model)),
                other => other?,
            }
            sum += value * starts.len() as f64;
            seen += starts.len();
        }
        let train_loss = sum / seen as f64;
        let val_loss = evaluate_loss(&model, &prepared, &val, cfg)?;
        let score = val_loss.unwrap_or(train_loss);
        if !score.is_finite() {
            let mut last_good = model.clone();
            if let Some((_, _, params)) = &best {
                *last_good.params_mut() = params.clone();
            }
            return Err(TrainError::Diverged {
                epoch,
                loss: score,
                last_good: Box::new(last_good),
            });
        }
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, model.params().clone()));
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_loss,
            wall_ms: started.elapsed().as_millis() as u64,
        };
        if let Some(out) = history_out.as_deref_mut() {
            serde_json::to_writer(&mut *out, &record).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
        history.push(record);
    }

    let best_epoch = match best {
        Some((_, epoch, params)) => {
            *model.params_mut() = params;
            epoch
        }
        None => 0,
    };
    Ok(TrainedModel {
        model,
        normalizer,
        history,
        best_epoch,
    })
}

/// Raw-scale predictions, ground truth and persistence forecasts over a set
/// of segments, all `B×H'×N` (or `B×1×N` with `final_step_only`).
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub prediction: Tensor,
    pub truth: Tensor,
    pub persistence: Tensor,
}

impl Evaluation {
    pub fn report(&self) -> Result<MetricReport, MetricsError> {
        report_with_nodes(&self.prediction, &self.truth)
    }

    pub fn persistence_report(&self) -> Result<MetricReport, MetricsError> {
        report_with_nodes(&self.persistence, &self.truth)
    }
}

fn last_step(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (b, hp, n) = (s[0], s[1], s[2]);
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        out.extend_from_slice(&t.data()[(i * hp + hp - 1) * n..(i * hp + hp) * n]);
    }
    Tensor::new(vec![b, 1, n], out).expect("shape")
}

/// Runs the model over every window of `segments`. NaN inputs are
/// mean-filled; NaN targets stay NaN so the metrics mask them.
pub fn evaluate(
    model: &Model,
    normalizer: &Normalizer,
    corpus: &Corpus,
    segments: &[Segment],
    final_step_only: bool,
) -> Result<Evaluation, TrainError> {
    let (h, hp) = (model.config().history, model.config().horizon);
    let prepared = prepare(corpus, model, normalizer)?;
    let n = model.config().num_nodes;
    let (mut pred, mut truth, mut persist) = (Vec::new(), Vec::new(), Vec::new());
    let mut count = 0;
    for seg in segments {
        let p = prepared
            .iter()
            .find(|p| p.id == seg.scenario)
            .ok_or_else(|| TrainError::Split(format!("unknown scenario `{}`", seg.scenario)))?;
        let raw = &corpus.scenario(&seg.scenario).expect("prepared").series;
        let starts: Vec<usize> = (seg.start..seg.end).collect();
        for chunk in starts.chunks(64) {
            let (x, _) = batch(&p.series, chunk, h, hp, true);
            let y = normalizer.denormalize(&model.predict(&x, &p.ctx)?);
            let (raw_x, raw_y) = batch(raw, chunk, h, hp, false);
            let mut base = persistence_baseline(&raw_x, hp);
            // A missing last observation falls back to the training mean.
            base.data_mut().iter_mut().for_each(|v| {
                if v.is_nan() {
                    *v = normalizer.mean
                }
            });
            pred.extend(y.into_data());
            truth.extend(raw_y.into_data());
            persist.extend(base.into_data());
            count += chunk.len();
        }
    }
    if count == 0 {
        return Err(TrainError::NoWindows("evaluation"));
    }
    let shape = vec![count, hp, n];
    let mut e = Evaluation {
        prediction: Tensor::new(shape.clone(), pred)?,
        truth: Tensor::new(shape.clone(), truth)?,
        persistence: Tensor::new(shape, persist)?,
    };
    if final_step_only {
        e = Evaluation {
            prediction: last_step(&e.prediction),
            truth: last_step(&e.truth),
            persistence: last_step(&e.persistence),
        };
    }
    Ok(e)
}

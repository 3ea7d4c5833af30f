//! Decouple-then-fuse forecaster: a time/feature mixer stack for the
//! history window, a relation-composing graph encoder for the static road
//! features, and a squeeze-excitation residual block that fuses the two.
//!
//! Tensor layout throughout is `B×H×N` (batch, time, node).

mod params;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{compose_relations, gcn_propagate, CandidateRelations, TrafficGraph};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use params::{ModelParams, ParamVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("unknown model variant `{0}`")]
    UnknownVariant(String),
    #[error("input shape {got:?} does not match (B, {history}, {nodes})")]
    InputShape { got: Vec<usize>, history: usize, nodes: usize },
    #[error("graph has {graph} nodes / {features} features, model expects {nodes} / {feature_dim}")]
    GraphShape {
        graph: usize,
        features: usize,
        nodes: usize,
        feature_dim: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// History length `H`.
    pub history: usize,
    /// Forecast horizon `H'`.
    pub horizon: usize,
    pub num_nodes: usize,
    /// Static feature width `d`.
    pub feature_dim: usize,
    /// Temporal mixer blocks `K`.
    pub mixer_blocks: usize,
    pub mix_width: usize,
    /// Spatial channels `C`.
    pub channels: usize,
    /// Relation layers `L_g`.
    pub relation_layers: usize,
    pub gcn_out: usize,
    /// SE reduction ratio `r`.
    pub se_reduction: usize,
    pub dropout: f64,
    /// Feed edge weights (rather than 0/1 connectivity) into the candidates.
    #[serde(default = "default_true")]
    pub weighted_adjacency: bool,
    /// Subtract each node's window mean from the input and add it back to
    /// the prediction.
    #[serde(default)]
    pub center_window: bool,
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history: 9,
            horizon: 1,
            num_nodes: 24,
            feature_dim: 2,
            mixer_blocks: 2,
            mix_width: 100,
            channels: 4,
            relation_layers: 2,
            gcn_out: 16,
            se_reduction: 2,
            dropout: 0.2,
            weighted_adjacency: true,
            center_window: true,
        }
    }
}

/// Number of stacked representation streams (temporal, spatial).
pub const STREAMS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("history", self.history),
            ("horizon", self.horizon),
            ("num_nodes", self.num_nodes),
            ("feature_dim", self.feature_dim),
            ("mixer_blocks", self.mixer_blocks),
            ("mix_width", self.mix_width),
            ("channels", self.channels),
            ("relation_layers", self.relation_layers),
            ("gcn_out", self.gcn_out),
            ("se_reduction", self.se_reduction),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// SE bottleneck width `⌈2/r⌉`.
    pub fn squeeze_width(&self) -> usize {
        STREAMS.div_ceil(self.se_reduction).max(1)
    }

    /// Selection slots per channel: two for the first relation layer, one
    /// for each further layer.
    pub fn relation_slots(&self) -> usize {
        self.relation_layers + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoSpatial,
    NoTemporal,
    NoFusion,
    SpatialAsGcn,
    TemporalAsFc,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::NoSpatial,
        Variant::NoTemporal,
        Variant::NoFusion,
        Variant::SpatialAsGcn,
        Variant::TemporalAsFc,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatial => "no_spatial",
            Variant::NoTemporal => "no_temporal",
            Variant::NoFusion => "no_fusion",
            Variant::SpatialAsGcn => "spatial_as_gcn",
            Variant::TemporalAsFc => "temporal_as_fc",
        }
    }

    /// Row label used in ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSpatial => "w/o spatial",
            Variant::NoTemporal => "w/o temporal",
            Variant::NoFusion => "w/o fusion",
            Variant::SpatialAsGcn => "spatial -> GCN",
            Variant::TemporalAsFc => "temporal -> FC",
        }
    }

    fn has_spatial(self) -> bool {
        !matches!(self, Variant::NoSpatial)
    }

    fn has_relations(self) -> bool {
        self.has_spatial() && self != Variant::SpatialAsGcn
    }

    fn has_se(self) -> bool {
        self != Variant::NoFusion
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, ModelError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }
}

/// Graph-derived constants for one scenario.
#[derive(Debug, Clone)]
pub struct SpatialContext {
    num_nodes: usize,
    candidates: Tensor,
    forward_adjacency: Tensor,
    features: Tensor,
}

impl SpatialContext {
    pub fn new(graph: &TrafficGraph, weighted: bool) -> Self {
        Self::with_candidates(graph, CandidateRelations::from_graph(graph, weighted))
    }

    /// Uses an explicit candidate set; `[0]` doubles as the fixed adjacency
    /// of the plain-GCN variant.
    pub fn with_candidates(graph: &TrafficGraph, candidates: CandidateRelations) -> Self {
        Self {
            num_nodes: graph.num_nodes(),
            forward_adjacency: candidates.matrices()[0].clone(),
            candidates: candidates.stacked(),
            features: graph.features_tensor(),
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_candidates(&self) -> usize {
        self.candidates.shape()[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Result of one forward pass.
pub struct Forward<'t> {
    pub prediction: Var<'t>,
    /// `B×2` SE channel gates; absent for variants without SE.
    pub gates: Option<Var<'t>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    variant: Variant,
    params: ModelParams,
}

fn fan_in_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

impl Model {
    /// Builds a variant with seeded uniform(±1/√fan_in) weights and zero
    /// biases and relation logits.
    pub fn new(config: ModelConfig, variant: Variant, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let (h, hp, n) = (c.history, c.horizon, c.num_nodes);
        let mut p = ModelParams::new();
        let mut weight = |p: &mut ModelParams, path: String, shape: &[usize], fan_in: usize| {
            p.insert(path, Tensor::uniform(shape, fan_in_bound(fan_in), &mut rng));
        };

        match variant {
            Variant::NoTemporal => {
                p.insert("temporal.last.scale", Tensor::full(&[n], 1.0));
                p.insert("temporal.last.bias", Tensor::zeros(&[n]));
            }
            Variant::TemporalAsFc => {
                weight(&mut p, "temporal.fc.weight".into(), &[h * n, hp * n], h * n);
                p.insert("temporal.fc.bias", Tensor::zeros(&[hp * n]));
            }
            _ => {
                for k in 0..c.mixer_blocks {
                    weight(&mut p, format!("temporal.block{k}.time.weight"), &[h, h], h);
                    p.insert(format!("temporal.block{k}.time.bias"), Tensor::zeros(&[h]));
                    weight(&mut p, format!("temporal.block{k}.feat.w1"), &[n, c.mix_width], n);
                    p.insert(format!("temporal.block{k}.feat.b1"), Tensor::zeros(&[c.mix_width]));
                    weight(&mut p, format!("temporal.block{k}.feat.w2"), &[c.mix_width, n], c.mix_width);
                    p.insert(format!("temporal.block{k}.feat.b2"), Tensor::zeros(&[n]));
                }
                weight(&mut p, "temporal.head.weight".into(), &[h, hp], h);
                p.insert("temporal.head.bias", Tensor::zeros(&[hp]));
            }
        }

        if variant.has_spatial() {
            if variant.has_relations() {
                for i in 0..c.channels {
                    for s in 0..c.relation_slots() {
                        p.insert(format!("spatial.relation.c{i}.s{s}"), Tensor::zeros(&[CANDIDATES]));
                    }
                }
            }
            weight(&mut p, "spatial.gcn.weight".into(), &[c.feature_dim, c.gcn_out], c.feature_dim);
            let z = c.channels * c.gcn_out;
            weight(&mut p, "spatial.proj.weight".into(), &[z, hp], z);
            p.insert("spatial.proj.bias", Tensor::zeros(&[hp]));
        }

        if variant.has_se() {
            for s in 0..STREAMS {
                weight(&mut p, format!("fusion.res.s{s}.weight"), &[n, n], n);
                p.insert(format!("fusion.res.s{s}.bias"), Tensor::zeros(&[n]));
            }
            let sq = c.squeeze_width();
            weight(&mut p, "fusion.se.w1".into(), &[STREAMS, sq], STREAMS);
            weight(&mut p, "fusion.se.w2".into(), &[sq, STREAMS], sq);
            p.insert("fusion.combine", Tensor::full(&[STREAMS], 1.0));
        } else {
            p.insert("fusion.alpha", Tensor::scalar(1.0));
            p.insert("fusion.beta", Tensor::scalar(1.0));
        }

        Ok(Self {
            config,
            variant,
            params: p,
        })
    }

    pub fn from_parts(config: ModelConfig, variant: Variant, params: ModelParams) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = Model::new(config.clone(), variant, 0)?;
        for (path, t) in reference.params.iter() {
            match params.get(path) {
                Some(p) if p.shape() == t.shape() => {}
                _ => return Err(ModelError::MissingParam(path.clone())),
            }
        }
        if params.len() != reference.params.len() {
            let extra = params.paths().find(|p| !reference.params.contains(p)).unwrap_or("?");
            return Err(ModelError::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config,
            variant,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.count()
    }

    pub fn check_graph(&self, ctx: &SpatialContext) -> Result<(), ModelError> {
        if ctx.num_nodes != self.config.num_nodes || ctx.feature_dim() != self.config.feature_dim {
            return Err(ModelError::GraphShape {
                graph: ctx.num_nodes,
                features: ctx.feature_dim(),
                nodes: self.config.num_nodes,
                feature_dim: self.config.feature_dim,
            });
        }
        if self.variant.has_relations() && ctx.num_candidates() != CANDIDATES {
            return Err(ModelError::Config(format!(
                "relation logits expect {CANDIDATES} candidates, context has {}",
                ctx.num_candidates()
            )));
        }
        Ok(())
    }

    /// Full forward pass `B×H×N → B×H'×N`.
    pub fn forward<'t, R: Rng + ?Sized>(
        &self,
        vars: &ParamVars<'t>,
        x: &Var<'t>,
        ctx: &SpatialContext,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<'t>, ModelError> {
        let c = &self.config;
        let shape = x.shape();
        if shape.len() != 3 || shape[1] != c.history || shape[2] != c.num_nodes {
            return Err(ModelError::InputShape {
                got: shape,
                history: c.history,
                nodes: c.num_nodes,
            });
        }
        self.check_graph(ctx)?;
        let batch = shape[0];
        let tape = x.tape();
        let (x, level) = if c.center_window {
            let (centered, level) = center_window(x)?;
            (centered, Some(level))
        } else {
            (*x, None)
        };
        let x = &x;
        let get = |path: &str| vars.get(path).copied().ok_or_else(|| ModelError::MissingParam(path.into()));

        let y1 = match self.variant {
            Variant::NoTemporal => {
                let last = x.narrow(1, c.history - 1, 1)?;
                let y = last.mul(&get("temporal.last.scale")?)?.add(&get("temporal.last.bias")?)?;
                repeat_time(&y, c.horizon)?
            }
            Variant::TemporalAsFc => {
                let flat = x.reshape(&[batch, c.history * c.num_nodes])?;
                flat.matmul(&get("temporal.fc.weight")?)?
                    .add(&get("temporal.fc.bias")?)?
                    .reshape(&[batch, c.horizon, c.num_nodes])?
            }
            _ => temporal_forward(vars, x, c, mode, rng)?,
        };

        let y2 = if self.variant.has_spatial() {
            let adjacency = match self.variant {
                Variant::SpatialAsGcn => {
                    let a = tape.constant(ctx.forward_adjacency.clone());
                    vec![a; c.channels]
                }
                _ => {
                    let stacked = tape.constant(ctx.candidates.clone());
                    let slots = (0..c.channels)
                        .map(|i| {
                            (0..c.relation_slots())
                                .map(|s| get(&format!("spatial.relation.c{i}.s{s}")))
                                .collect::<Result<Vec<_>, _>>()
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    compose_relations(&stacked, &slots, c.num_nodes)?
                }
            };
            let features = tape.constant(ctx.features.clone());
            Some(spatial_head(
                &adjacency,
                &features,
                &get("spatial.gcn.weight")?,
                &get("spatial.proj.weight")?,
                &get("spatial.proj.bias")?,
            )?)
        } else {
            None
        };

        if self.variant.has_se() {
            let second = match &y2 {
                Some(y2) => y2.expand_leading(batch),
                None => y1,
            };
            let fusion = FusionVars {
                res_weight: [get("fusion.res.s0.weight")?, get("fusion.res.s1.weight")?],
                res_bias: [get("fusion.res.s0.bias")?, get("fusion.res.s1.bias")?],
                se_w1: get("fusion.se.w1")?,
                se_w2: get("fusion.se.w2")?,
                combine: get("fusion.combine")?,
            };
            let (prediction, gates) = se_fuse(&y1, &second, &fusion)?;
            Ok(Forward {
                prediction: restore_level(&prediction, level)?,
                gates: Some(gates),
            })
        } else {
            let y2 = y2.expect("no_fusion keeps the spatial branch").expand_leading(batch);
            let prediction = y1.mul(&get("fusion.alpha")?)?.add(&y2.mul(&get("fusion.beta")?)?)?;
            Ok(Forward {
                prediction: restore_level(&prediction, level)?,
                gates: None,
            })
        }
    }

    /// Eval-mode prediction for a `B×H×N` input.
    pub fn predict(&self, x: &Tensor, ctx: &SpatialContext) -> Result<Tensor, ModelError> {
        let tape = Tape::new();
        let vars = self.params.register(&tape, false);
        let xv = tape.constant(x.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(self.forward(&vars, &xv, ctx, Mode::Eval, &mut rng)?.prediction.value())
    }
}

/// Size of the candidate relation basis `{A, Aᵀ, I}`.
pub const CANDIDATES: usize = 3;

/// Splits `B×H×N` into the per-node window mean (`B×N×1`) and the centered input.
pub fn center_window<'t>(x: &Var<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let h = x.shape()[1];
    let tape = x.tape();
    let xt = x.transpose()?;
    let level = xt.matmul(&tape.constant(Tensor::full(&[h, 1], 1.0 / h as f64)))?;
    let spread = level.matmul(&tape.constant(Tensor::full(&[1, h], 1.0)))?;
    Ok((xt.sub(&spread)?.transpose()?, level))
}

fn restore_level<'t>(y: &Var<'t>, level: Option<Var<'t>>) -> Result<Var<'t>, TensorError> {
    let Some(level) = level else { return Ok(*y) };
    let hp = y.shape()[1];
    let spread = level.matmul(&y.tape().constant(Tensor::full(&[1, hp], 1.0)))?;
    y.transpose()?.add(&spread)?.transpose()
}

fn repeat_time<'t>(y: &Var<'t>, horizon: usize) -> Result<Var<'t>, TensorError> {
    if horizon == 1 {
        Ok(*y)
    } else {
        Var::concat(&vec![*y; horizon], 1)
    }
}

/// `X + dropout(ReLU(W_t·X + b))` along the time axis, per node.
pub fn time_mix<'t, R: Rng + ?Sized>(
    x: &Var<'t>,
    weight: &Var<'t>,
    bias: &Var<'t>,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>, TensorError> {
    let mixed = x
        .transpose()?
        .matmul(&weight.transpose()?)?
        .add(bias)?
        .relu()
        .dropout(dropout, mode == Mode::Train, rng)?
        .transpose()?;
    x.add(&mixed)
}

/// `X + W₂·dropout(ReLU(W₁·X + b₁)) + b₂` across nodes, per time step.
#[allow(clippy::too_many_arguments)]
pub fn feature_mix<'t, R: Rng + ?Sized>(
    x: &Var<'t>,
    w1: &Var<'t>,
    b1: &Var<'t>,
    w2: &Var<'t>,
    b2: &Var<'t>,
    dropout: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>, TensorError> {
    let hidden = x.matmul(w1)?.add(b1)?.relu().dropout(dropout, mode == Mode::Train, rng)?;
    x.add(&hidden.matmul(w2)?.add(b2)?)
}

/// `K` mixer blocks followed by the learned `H → H'` head.
pub fn temporal_forward<'t, R: Rng + ?Sized>(
    vars: &ParamVars<'t>,
    x: &Var<'t>,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>, ModelError> {
    let get = |path: String| vars.get(&path).copied().ok_or(ModelError::MissingParam(path));
    let mut h = *x;
    for k in 0..config.mixer_blocks {
        h = time_mix(
            &h,
            &get(format!("temporal.block{k}.time.weight"))?,
            &get(format!("temporal.block{k}.time.bias"))?,
            config.dropout,
            mode,
            rng,
        )?;
        h = feature_mix(
            &h,
            &get(format!("temporal.block{k}.feat.w1"))?,
            &get(format!("temporal.block{k}.feat.b1"))?,
            &get(format!("temporal.block{k}.feat.w2"))?,
            &get(format!("temporal.block{k}.feat.b2"))?,
            config.dropout,
            mode,
            rng,
        )?;
    }
    let y = h
        .transpose()?
        .matmul(&get("temporal.head.weight".into())?)?
        .add(&get("temporal.head.bias".into())?)?
        .transpose()?;
    Ok(y)
}

/// Per-channel GCN over the given adjacencies, channel concatenation, and
/// the per-node projection to `H'`. Returns `H'×N`.
pub fn spatial_head<'t>(
    adjacency: &[Var<'t>],
    features: &Var<'t>,
    gcn_weight: &Var<'t>,
    proj_weight: &Var<'t>,
    proj_bias: &Var<'t>,
) -> Result<Var<'t>, TensorError> {
    let channels = adjacency
        .iter()
        .map(|a| gcn_propagate(a, features, gcn_weight))
        .collect::<Result<Vec<_>, _>>()?;
    let z = Var::concat(&channels, 1)?;
    z.matmul(proj_weight)?.add(proj_bias)?.transpose()
}

pub struct FusionVars<'t> {
    pub res_weight: [Var<'t>; STREAMS],
    pub res_bias: [Var<'t>; STREAMS],
    pub se_w1: Var<'t>,
    pub se_w2: Var<'t>,
    pub combine: Var<'t>,
}

/// Squeeze-excitation residual fusion of two `B×H'×N` streams.
///
/// `Z_s = ReLU(Y_s·R_s + c_s)`; the gate pools each `Z_s` over `H'×N`,
/// squeezes through `W₁`, excites through `W₂`, and the output is
/// `Σ_s w_s (Y_s + gate_s · Z_s)`. Returns the prediction and the `B×2` gates.
pub fn se_fuse<'t>(y1: &Var<'t>, y2: &Var<'t>, f: &FusionVars<'t>) -> Result<(Var<'t>, Var<'t>), TensorError> {
    let batch = y1.shape()[0];
    let streams = [*y1, *y2];
    let stacked = Var::stack(&streams)?;
    let z: Vec<Var<'t>> = (0..STREAMS)
        .map(|s| {
            let ys = stacked.narrow(0, s, 1)?.reshape(&y1.shape())?;
            Ok(ys.matmul(&f.res_weight[s])?.add(&f.res_bias[s])?.relu())
        })
        .collect::<Result<_, TensorError>>()?;
    let pooled = Var::stack(&z)?.mean_axes(&[2, 3])?.transpose()?;
    let gates = pooled.matmul(&f.se_w1)?.relu().matmul(&f.se_w2)?.sigmoid();
    let mut out: Option<Var<'t>> = None;
    for s in 0..STREAMS {
        let gate = gates.narrow(1, s, 1)?.reshape(&[batch])?;
        let fused = streams[s].add(&z[s].scale_batch(&gate)?)?;
        let term = fused.mul(&f.combine.narrow(0, s, 1)?)?;
        out = Some(match out {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok((out.expect("two streams"), gates))
}

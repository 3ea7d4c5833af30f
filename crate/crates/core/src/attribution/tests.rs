use super::*;
use crate::dataset_io::{Corpus, SplitHint};
use crate::graph::{Edge, TrafficGraph};
use crate::model::{ModelConfig, Variant};
use crate::training::{fit, SplitSpec, TrainConfig};

fn toy_config() -> ModelConfig {
    ModelConfig {
        history: 5,
        horizon: 2,
        num_nodes: 4,
        feature_dim: 2,
        mixer_blocks: 1,
        mix_width: 6,
        channels: 2,
        relation_layers: 1,
        gcn_out: 3,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn toy_scenario(id: &str, phase: f64) -> ScenarioDataset {
    let n = 4;
    let edges = (0..n - 1).flat_map(|i| [Edge(i, i + 1, 1.0), Edge(i + 1, i, 1.0)]).collect();
    let rows: Vec<Vec<f64>> = (0..60)
        .map(|t| (0..n).map(|v| 8.0 + 4.0 * (0.4 * t as f64 + v as f64 + phase).sin()).collect())
        .collect();
    ScenarioDataset {
        id: id.into(),
        graph: TrafficGraph::new(n, edges, vec![vec![1.0, 2.0]; n]).unwrap(),
        series: Tensor::from_rows(&rows),
        removed_edges: vec![],
        split_hint: SplitHint::Train,
    }
}

fn trained_toy() -> (Model, Normalizer, ScenarioDataset) {
    let mut test = toy_scenario("s1", 1.0);
    test.split_hint = SplitHint::Test;
    let corpus = Corpus {
        interval_minutes: 5.0,
        variable_name: "flow".into(),
        bridges: vec![],
        scenarios: vec![toy_scenario("s0", 0.0), test],
    };
    let model = Model::new(toy_config(), Variant::Full, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 5,
        learning_rate: 1e-2,
        ..TrainConfig::default()
    };
    let split = SplitSpec::default().resolve(&corpus, 5, 2).unwrap();
    let t = fit(model, &corpus, &cfg, &split, None).unwrap();
    (t.model, t.normalizer, corpus.scenarios[0].clone())
}

fn window(s: &ScenarioDataset, start: usize) -> Tensor {
    let n = s.num_nodes();
    Tensor::new(vec![5, n], s.series.data()[start * n..(start + 5) * n].to_vec()).unwrap()
}

#[test]
fn linear_model_is_exact() {
    let weights = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.75]).unwrap();
    let f = Linear { weights: weights.clone(), offset: 4.0 };
    let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, -3.0, 4.0, 0.5, 6.0]).unwrap();
    for m in [1, 7, 256] {
        let map = integrated_gradients(&f, Target::NetworkMean, &x, &Tensor::zeros(&[2, 3]), None, m).unwrap();
        for ((v, w), xi) in map.values.data().iter().zip(weights.data()).zip(x.data()) {
            assert!((v - w * xi).abs() <= 1e-15 * (w * xi).abs());
        }
        assert!(map.completeness_gap <= 1e-13);
    }
}

#[test]
fn equal_input_and_baseline_give_zero() {
    let (model, normalizer, s) = trained_toy();
    let ctx = SpatialContext::new(&s.graph, true);
    let f = ModelOutput::new(&model, &ctx, normalizer, Target::Entry { node: 1, step: 0 }).unwrap();
    let x = window(&s, 3);
    let map = integrated_gradients(&f, Target::NetworkMean, &x, &x, None, 16).unwrap();
    assert!(map.values.data().iter().all(|&v| v == 0.0));

    // Coordinates where x == x' get exactly zero even when others differ.
    let mut base = Tensor::zeros(&[5, 4]);
    for t in 0..5 {
        base.set(&[t, 2], x.at(&[t, 2]));
    }
    let map = integrated_gradients(&f, Target::NetworkMean, &x, &base, None, 16).unwrap();
    for t in 0..5 {
        assert_eq!(map.values.at(&[t, 2]), 0.0);
    }
}

#[test]
fn completeness_on_trained_model() {
    let (model, normalizer, s) = trained_toy();
    let ctx = SpatialContext::new(&s.graph, true);
    let f = ModelOutput::new(&model, &ctx, normalizer, Target::NetworkMean).unwrap();
    let x = window(&s, 10);
    let base = Tensor::zeros(&[5, 4]);
    let g128 = integrated_gradients(&f, Target::NetworkMean, &x, &base, Some(BaselineKind::Zeros), 128).unwrap();
    let g256 = integrated_gradients(&f, Target::NetworkMean, &x, &base, Some(BaselineKind::Zeros), 256).unwrap();
    let delta = (g256.f_input - g256.f_baseline).abs();
    assert!(g256.completeness_gap <= 1e-3 * delta + 1e-8, "{} vs {}", g256.completeness_gap, delta);
    assert!(g256.completeness_gap <= g128.completeness_gap + 1e-9);
}

struct Blend<'a> {
    a: &'a dyn ScalarFunction,
    b: &'a dyn ScalarFunction,
    alpha: f64,
    beta: f64,
}

impl ScalarFunction for Blend<'_> {
    fn value_and_grad(&self, x: &Tensor) -> Result<(f64, Tensor), AttributionError> {
        let (va, ga) = self.a.value_and_grad(x)?;
        let (vb, gb) = self.b.value_and_grad(x)?;
        let g: Vec<f64> = ga.data().iter().zip(gb.data()).map(|(p, q)| self.alpha * p + self.beta * q).collect();
        Ok((self.alpha * va + self.beta * vb, Tensor::new(x.shape().to_vec(), g)?))
    }
}

#[test]
fn attribution_is_linear_in_the_function() {
    let (model, normalizer, s) = trained_toy();
    let ctx = SpatialContext::new(&s.graph, true);
    let f = ModelOutput::new(&model, &ctx, normalizer, Target::Entry { node: 0, step: 1 }).unwrap();
    let g = ModelOutput::new(&model, &ctx, normalizer, Target::Entry { node: 3, step: 0 }).unwrap();
    let (alpha, beta) = (0.7, -1.3);
    let blend = Blend { a: &f, b: &g, alpha, beta };
    let x = window(&s, 20);
    let base = Tensor::full(&[5, 4], normalizer.mean);
    let ig = |h: &dyn ScalarFunction| integrated_gradients_raw(h, &x, &base, 32).unwrap().0;
    let (a, b, c) = (ig(&f), ig(&g), ig(&blend));
    for i in 0..c.len() {
        let want = alpha * a.data()[i] + beta * b.data()[i];
        assert!((c.data()[i] - want).abs() <= 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn bad_target_and_steps_rejected() {
    let (model, normalizer, s) = trained_toy();
    let ctx = SpatialContext::new(&s.graph, true);
    assert!(matches!(
        ModelOutput::new(&model, &ctx, normalizer, Target::Entry { node: 9, step: 0 }),
        Err(AttributionError::Target(_))
    ));
    let f = ModelOutput::new(&model, &ctx, normalizer, Target::NetworkMean).unwrap();
    let x = window(&s, 0);
    assert!(matches!(
        integrated_gradients(&f, Target::NetworkMean, &x, &x, None, 0),
        Err(AttributionError::Steps)
    ));
}

#[test]
fn constant_model_has_zero_importance() {
    let config = ModelConfig {
        center_window: false,
        ..toy_config()
    };
    let mut model = Model::new(config, Variant::Full, 0).unwrap();
    for (_, t) in model.params_mut().iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let s = toy_scenario("s0", 0.0);
    let imp = road_importance(&model, &Normalizer::identity(), &s, BaselineKind::Zeros, 8, 4).unwrap();
    assert!(imp.importance.iter().all(|&v| v == 0.0));
}

#[test]
fn importance_is_deterministic_and_finite_under_isolation() {
    let (model, normalizer, s) = trained_toy();
    let a = road_importance(&model, &normalizer, &s, BaselineKind::Zeros, 16, 5).unwrap();
    let b = road_importance(&model, &normalizer, &s.clone(), BaselineKind::Zeros, 16, 5).unwrap();
    assert_eq!(a, b);
    assert!(a.importance.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(a.importance.iter().cloned().fold(0.0, f64::max), 1.0);

    let mut cut = s.clone();
    let touching: Vec<(usize, usize)> = cut
        .graph
        .edges()
        .iter()
        .filter(|e| e.src() == 1 || e.dst() == 1)
        .map(|e| (e.src(), e.dst()))
        .collect();
    cut.graph = cut.graph.without_edges(&touching).unwrap();
    let c = road_importance(&model, &normalizer, &cut, BaselineKind::TrainMean, 16, 5).unwrap();
    assert!(c.importance.iter().all(|v| v.is_finite()));
}

#[test]
fn empty_scenario_rejected() {
    let (model, normalizer, s) = trained_toy();
    let mut short = s.clone();
    short.series = Tensor::zeros(&[3, 4]);
    assert!(matches!(
        road_importance(&model, &normalizer, &short, BaselineKind::Zeros, 8, 4),
        Err(AttributionError::Empty)
    ));
}

#[test]
fn export_files() {
    let (model, normalizer, s) = trained_toy();
    let imp = road_importance(&model, &normalizer, &s, BaselineKind::Zeros, 8, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_importance(&imp, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("importance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("node_id,importance\n0,"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("importance.json")).unwrap()).unwrap();
    for key in ["target", "baseline_kind", "m", "completeness_gap"] {
        assert!(json.get(key).is_some(), "{key}");
    }
    assert_eq!(json["m"], 8);
}

#[test]
fn sampled_windows_are_spread() {
    assert_eq!(sample_windows(10, 3), vec![0, 4, 9]);
    assert_eq!(sample_windows(2, 5), vec![0, 1]);
    assert_eq!(sample_windows(7, 1), vec![6]);
    assert!(sample_windows(0, 3).is_empty());
}

//! Synthetic scenario-topology traffic generator.
//!
//! Builds a clustered random geometric road network, routes periodic
//! origin-destination demand along shortest paths, and records per-node
//! throughput capped by node capacity plus Gaussian noise. Each scenario
//! closes a different set of roads, so scenarios share the node set but not
//! the edge set.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::f64::consts::PI;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset_io::{round_sig9, Corpus, ScenarioDataset, SplitHint};
use crate::graph::{Edge, GraphError, TrafficGraph};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid generator spec: field `{field}`: {reason}")]
    Spec { field: &'static str, reason: String },
    #[error("edge_density {0} is too low to connect clusters (need >= 1)")]
    DensityTooLow(f64),
    #[error("field `removals_per_scenario`: cannot draw {wanted} distinct removal sets of {per} roads from {roads} roads")]
    NotEnoughRoads { wanted: usize, per: usize, roads: usize },
    #[error("test scenario `{0}` repeats a training removal set")]
    DuplicateRemovalSet(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Road closures per scenario: a random count, or explicit directed edge lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Removals {
    Count(usize),
    Explicit(Vec<Vec<(usize, usize)>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    /// Nearest in-cluster neighbours linked per node (two-way roads).
    pub edge_density: f64,
    /// Defaults to `⌈N/8⌉`.
    pub num_clusters: Option<usize>,
    pub num_scenarios: usize,
    pub num_test_scenarios: usize,
    /// Scenario 0 keeps the intact network.
    pub intact_first: bool,
    /// Random count closes two-way roads (both directions).
    pub removals_per_scenario: Removals,
    pub steps: usize,
    pub interval_minutes: f64,
    pub demand_period: usize,
    pub num_od_pairs: usize,
    /// Explicit OD pairs; overrides `num_od_pairs`.
    pub od_pairs: Option<Vec<(usize, usize)>>,
    /// Peak demand per OD pair is drawn from `[lo, hi]`.
    pub demand_amplitude: (f64, f64),
    pub noise_std: f64,
    /// Node throughput cap is `capacity_scale · capacity · lanes`; `None` disables caps.
    pub capacity_scale: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nodes: 24,
            edge_density: 2.0,
            num_clusters: None,
            num_scenarios: 6,
            num_test_scenarios: 2,
            intact_first: true,
            removals_per_scenario: Removals::Count(2),
            steps: 168,
            interval_minutes: 5.0,
            demand_period: 56,
            num_od_pairs: 30,
            od_pairs: None,
            demand_amplitude: (5.0, 15.0),
            noise_std: 2.0,
            capacity_scale: Some(8.0),
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let bad = |field, reason: &str| {
            Err(DatagenError::Spec {
                field,
                reason: reason.to_string(),
            })
        };
        if self.num_nodes == 0 {
            return bad("num_nodes", "must be >= 1");
        }
        if self.steps == 0 {
            return bad("steps", "must be >= 1");
        }
        if self.num_scenarios == 0 {
            return bad("num_scenarios", "must be >= 1");
        }
        if self.num_test_scenarios >= self.num_scenarios {
            return bad("num_test_scenarios", "must leave at least one training scenario");
        }
        if self.demand_period == 0 {
            return bad("demand_period", "must be >= 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std", "must be finite and >= 0");
        }
        let (lo, hi) = self.demand_amplitude;
        if !(lo >= 0.0 && hi >= lo && hi.is_finite()) {
            return bad("demand_amplitude", "need 0 <= lo <= hi");
        }
        if matches!(self.capacity_scale, Some(s) if !(s > 0.0)) {
            return bad("capacity_scale", "must be > 0");
        }
        if !(self.interval_minutes > 0.0) {
            return bad("interval_minutes", "must be > 0");
        }
        if let Some(k) = self.num_clusters {
            if k == 0 || k > self.num_nodes {
                return bad("num_clusters", "must be in 1..=num_nodes");
            }
        }
        if let Some(pairs) = &self.od_pairs {
            if pairs.iter().any(|&(o, d)| o >= self.num_nodes || d >= self.num_nodes || o == d) {
                return bad("od_pairs", "pairs must be distinct in-range nodes");
            }
        }
        if let Removals::Explicit(sets) = &self.removals_per_scenario {
            if sets.len() != self.num_scenarios {
                return bad("removals_per_scenario", "need one edge list per scenario");
            }
        }
        if self.edge_density < 1.0 {
            return Err(DatagenError::DensityTooLow(self.edge_density));
        }
        Ok(())
    }

    fn clusters(&self) -> usize {
        self.num_clusters.unwrap_or_else(|| self.num_nodes.div_ceil(8).max(1))
    }
}

/// Base network with generator-side metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub graph: TrafficGraph,
    pub positions: Vec<(f64, f64)>,
    pub cluster_of: Vec<usize>,
    /// Bridge edges, both directions.
    pub bridges: Vec<(usize, usize)>,
}

impl Network {
    pub fn is_bridge(&self, src: usize, dst: usize) -> bool {
        self.bridges.contains(&(src, dst))
    }

    /// Two-way roads as `(min, max)` node pairs.
    pub fn roads(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = self
            .graph
            .edges()
            .iter()
            .map(|e| (e.src().min(e.dst()), e.src().max(e.dst())))
            .collect();
        set.into_iter().collect()
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

pub fn generate_network(spec: &SyntheticSpec) -> Result<Network, DatagenError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.num_nodes;
    let k = spec.clusters();
    let jitter = Normal::new(0.0, 0.08).expect("valid std");
    let cluster_of: Vec<usize> = (0..n).map(|i| i % k).collect();
    let positions: Vec<(f64, f64)> = cluster_of
        .iter()
        .map(|&c| {
            let angle = 2.0 * PI * c as f64 / k as f64;
            let (cx, cy) = if k == 1 {
                (0.5, 0.5)
            } else {
                (0.5 + 0.35 * angle.cos(), 0.5 + 0.35 * angle.sin())
            };
            (cx + jitter.sample(&mut rng), cy + jitter.sample(&mut rng))
        })
        .collect();

    let mut roads: BTreeSet<(usize, usize)> = BTreeSet::new();
    let neighbours = spec.edge_density.round() as usize;
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| cluster_of[i] == c).collect();
        for &i in &members {
            let mut others: Vec<usize> = members.iter().copied().filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                dist(positions[i], positions[a])
                    .total_cmp(&dist(positions[i], positions[b]))
                    .then(a.cmp(&b))
            });
            for &j in others.iter().take(neighbours) {
                roads.insert((i.min(j), i.max(j)));
            }
        }
        // Prim's tree keeps every cluster internally connected.
        if members.len() > 1 {
            let mut inside = vec![members[0]];
            let mut outside: Vec<usize> = members[1..].to_vec();
            while !outside.is_empty() {
                let (oi, &j, &i) = outside
                    .iter()
                    .enumerate()
                    .flat_map(|(oi, j)| inside.iter().map(move |i| (oi, j, i)))
                    .min_by(|a, b| dist(positions[*a.1], positions[*a.2]).total_cmp(&dist(positions[*b.1], positions[*b.2])))
                    .expect("non-empty");
                roads.insert((i.min(j), i.max(j)));
                inside.push(j);
                outside.remove(oi);
            }
        }
    }

    let mut bridges = Vec::new();
    if k > 1 {
        let links = if k == 2 { 1 } else { k };
        for c in 0..links {
            let d = (c + 1) % k;
            let mut best: Option<(f64, usize, usize)> = None;
            for i in (0..n).filter(|&i| cluster_of[i] == c) {
                for j in (0..n).filter(|&j| cluster_of[j] == d) {
                    let dd = dist(positions[i], positions[j]);
                    if best.is_none_or(|b| dd < b.0) {
                        best = Some((dd, i, j));
                    }
                }
            }
            let (_, i, j) = best.expect("clusters are non-empty");
            roads.insert((i.min(j), i.max(j)));
            bridges.push((i, j));
            bridges.push((j, i));
        }
    }
    bridges.sort_unstable();

    let mut edges = Vec::with_capacity(roads.len() * 2);
    for &(a, b) in &roads {
        let w = round_sig9(dist(positions[a], positions[b]).max(1e-3));
        edges.push(Edge(a, b, w));
        edges.push(Edge(b, a, w));
    }
    edges.sort_by_key(|e| (e.src(), e.dst()));
    let features = (0..n)
        .map(|_| {
            let capacity = round_sig9(rng.random_range(1.0..=4.0));
            let lanes = rng.random_range(1..=3) as f64;
            vec![capacity, lanes]
        })
        .collect();
    let graph = TrafficGraph::new(n, edges, features)?;
    Ok(Network {
        graph,
        positions,
        cluster_of,
        bridges,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OdPair {
    pub origin: usize,
    pub destination: usize,
    pub amplitude: f64,
    pub phase: f64,
}

/// OD demand shared by every scenario; phase depends on the origin cluster.
pub fn od_pairs(spec: &SyntheticSpec, network: &Network) -> Vec<OdPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(u64::MAX);
    let n = spec.num_nodes;
    let k = spec.clusters();
    let pairs: Vec<(usize, usize)> = match &spec.od_pairs {
        Some(p) => p.clone(),
        None if n < 2 => Vec::new(),
        None => (0..spec.num_od_pairs)
            .map(|_| {
                let picked = sample(&mut rng, n, 2);
                (picked.index(0), picked.index(1))
            })
            .collect(),
    };
    let (lo, hi) = spec.demand_amplitude;
    pairs
        .into_iter()
        .map(|(origin, destination)| OdPair {
            origin,
            destination,
            amplitude: if hi > lo { rng.random_range(lo..=hi) } else { lo },
            phase: 2.0 * PI * network.cluster_of[origin] as f64 / k as f64,
        })
        .collect()
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Node sequence of a weighted shortest path, or `None` when unreachable.
pub fn shortest_path(graph: &TrafficGraph, from: usize, to: usize) -> Option<Vec<usize>> {
    let n = graph.num_nodes();
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for e in graph.edges() {
        adj[e.src()].push((e.dst(), e.weight()));
    }
    let mut best = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    best[from] = 0.0;
    heap.push(HeapItem(0.0, from));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > best[u] {
            continue;
        }
        if u == to {
            break;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < best[v] {
                best[v] = nd;
                prev[v] = u;
                heap.push(HeapItem(nd, v));
            }
        }
    }
    if !best[to].is_finite() {
        return None;
    }
    let mut path = vec![to];
    let mut cur = to;
    while cur != from {
        cur = prev[cur];
        path.push(cur);
    }
    path.reverse();
    Some(path)
}

/// Demand of one OD pair at step `t`: `amplitude · (1 + sin(2πt/period + phase)) / 2`.
pub fn demand_at(od: &OdPair, t: usize, period: usize) -> f64 {
    od.amplitude * 0.5 * (1.0 + (2.0 * PI * t as f64 / period as f64 + od.phase).sin())
}

/// `T×N` flows on `network` with `removed` closed. `stream` selects the
/// scenario's noise stream.
pub fn simulate_flows(
    network: &Network,
    spec: &SyntheticSpec,
    removed: &[(usize, usize)],
    stream: u64,
) -> Result<Tensor, DatagenError> {
    let graph = network.graph.without_edges(removed)?;
    let n = graph.num_nodes();
    let demand = od_pairs(spec, network);
    let routes: Vec<Option<Vec<usize>>> = demand
        .iter()
        .map(|od| shortest_path(&graph, od.origin, od.destination))
        .collect();
    let caps: Vec<f64> = graph
        .static_features()
        .iter()
        .map(|f| spec.capacity_scale.map_or(f64::INFINITY, |s| s * f[0] * f[1]))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");

    let mut series = Tensor::zeros(&[spec.steps, n]);
    let data = series.data_mut();
    for t in 0..spec.steps {
        let row = &mut data[t * n..(t + 1) * n];
        for (od, route) in demand.iter().zip(&routes) {
            if let Some(path) = route {
                let q = demand_at(od, t, spec.demand_period);
                for &v in path {
                    row[v] += q;
                }
            }
        }
        for (v, x) in row.iter_mut().enumerate() {
            let mut flow = x.min(caps[v]);
            if spec.noise_std > 0.0 {
                flow += noise.sample(&mut rng);
            }
            *x = round_sig9(flow.max(0.0));
        }
    }
    Ok(series)
}

fn removal_sets(spec: &SyntheticSpec, network: &Network) -> Result<Vec<Vec<(usize, usize)>>, DatagenError> {
    match &spec.removals_per_scenario {
        Removals::Explicit(sets) => Ok(sets
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.sort_unstable();
                s
            })
            .collect()),
        Removals::Count(per) => {
            let roads = network.roads();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(u64::MAX - 1);
            let mut seen: BTreeSet<Vec<(usize, usize)>> = BTreeSet::new();
            let mut sets = Vec::with_capacity(spec.num_scenarios);
            if spec.intact_first {
                seen.insert(Vec::new());
                sets.push(Vec::new());
            }
            let random_needed = spec.num_scenarios - sets.len();
            if random_needed > 0 && (*per == 0 || *per > roads.len()) {
                return Err(DatagenError::NotEnoughRoads {
                    wanted: random_needed,
                    per: *per,
                    roads: roads.len(),
                });
            }
            let mut attempts = 0;
            while sets.len() < spec.num_scenarios {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(DatagenError::NotEnoughRoads {
                        wanted: random_needed,
                        per: *per,
                        roads: roads.len(),
                    });
                }
                let mut set: Vec<(usize, usize)> = sample(&mut rng, roads.len(), *per)
                    .into_iter()
                    .flat_map(|i| {
                        let (a, b) = roads[i];
                        [(a, b), (b, a)]
                    })
                    .collect();
                set.sort_unstable();
                if seen.insert(set.clone()) {
                    sets.push(set);
                }
            }
            Ok(sets)
        }
    }
}

/// Scenarios `s0..`; the last `num_test_scenarios` are held out.
pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus, DatagenError> {
    let network = generate_network(spec)?;
    let sets = removal_sets(spec, &network)?;
    let first_test = spec.num_scenarios - spec.num_test_scenarios;
    let train_sets: BTreeSet<&Vec<(usize, usize)>> = sets[..first_test].iter().collect();
    for (i, set) in sets.iter().enumerate().skip(first_test) {
        if train_sets.contains(set) {
            return Err(DatagenError::DuplicateRemovalSet(format!("s{i}")));
        }
    }
    let scenarios = sets
        .into_iter()
        .enumerate()
        .map(|(i, removed)| {
            let series = simulate_flows(&network, spec, &removed, i as u64)?;
            Ok(ScenarioDataset {
                id: format!("s{i}"),
                graph: network.graph.without_edges(&removed)?,
                series,
                removed_edges: removed,
                split_hint: if i < first_test { SplitHint::Train } else { SplitHint::Test },
            })
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    Ok(Corpus {
        interval_minutes: spec.interval_minutes,
        variable_name: "flow".to_string(),
        bridges: network.bridges.clone(),
        scenarios,
    })
}

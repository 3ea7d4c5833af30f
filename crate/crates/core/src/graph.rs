//! Traffic network representation, candidate relations, and the
//! differentiable relation-composition / graph-propagation path.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge ({src}, {dst}) references a node outside 0..{num_nodes}")]
    NodeOutOfRange { src: usize, dst: usize, num_nodes: usize },
    #[error("edge ({src}, {dst}) has non-positive or non-finite weight {weight}")]
    BadWeight { src: usize, dst: usize, weight: f64 },
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("self-loop on node {0}; self-relations come from the identity candidate")]
    SelfLoop(usize),
    #[error("static features have {rows} rows, expected {num_nodes}")]
    FeatureRows { rows: usize, num_nodes: usize },
    #[error("static feature rows must share one positive width")]
    FeatureWidth,
    #[error("edge ({0}, {1}) is not in the graph")]
    MissingEdge(usize, usize),
    #[error("matrix has a negative entry at ({0}, {1})")]
    NegativeEntry(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge(pub usize, pub usize, pub f64);

impl Edge {
    pub fn src(&self) -> usize {
        self.0
    }
    pub fn dst(&self) -> usize {
        self.1
    }
    pub fn weight(&self) -> f64 {
        self.2
    }
}

/// Directed weighted road graph with per-node static attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph")]
pub struct TrafficGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    static_features: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct RawGraph {
    num_nodes: usize,
    edges: Vec<Edge>,
    static_features: Vec<Vec<f64>>,
}

impl TryFrom<RawGraph> for TrafficGraph {
    type Error = GraphError;
    fn try_from(raw: RawGraph) -> Result<Self, GraphError> {
        TrafficGraph::new(raw.num_nodes, raw.edges, raw.static_features)
    }
}

impl TrafficGraph {
    pub fn new(num_nodes: usize, edges: Vec<Edge>, static_features: Vec<Vec<f64>>) -> Result<Self, GraphError> {
        let mut seen = BTreeSet::new();
        for e in &edges {
            if e.0 >= num_nodes || e.1 >= num_nodes {
                return Err(GraphError::NodeOutOfRange {
                    src: e.0,
                    dst: e.1,
                    num_nodes,
                });
            }
            if e.0 == e.1 {
                return Err(GraphError::SelfLoop(e.0));
            }
            if !(e.2 > 0.0 && e.2.is_finite()) {
                return Err(GraphError::BadWeight {
                    src: e.0,
                    dst: e.1,
                    weight: e.2,
                });
            }
            if !seen.insert((e.0, e.1)) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
        }
        if static_features.len() != num_nodes {
            return Err(GraphError::FeatureRows {
                rows: static_features.len(),
                num_nodes,
            });
        }
        let width = static_features.first().map_or(1, Vec::len);
        if width == 0 || static_features.iter().any(|r| r.len() != width) {
            return Err(GraphError::FeatureWidth);
        }
        Ok(Self {
            num_nodes,
            edges,
            static_features,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn static_features(&self) -> &[Vec<f64>] {
        &self.static_features
    }

    pub fn feature_dim(&self) -> usize {
        self.static_features.first().map_or(0, Vec::len)
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges.iter().any(|e| e.0 == src && e.1 == dst)
    }

    /// Dense `N×N` adjacency; edge weights when `weighted`, else 1.
    pub fn adjacency(&self, weighted: bool) -> Tensor {
        let n = self.num_nodes;
        let mut a = Tensor::zeros(&[n, n]);
        for e in &self.edges {
            a.set(&[e.0, e.1], if weighted { e.2 } else { 1.0 });
        }
        a
    }

    pub fn features_tensor(&self) -> Tensor {
        Tensor::from_rows(&self.static_features)
    }

    /// Copy of the graph without the listed directed edges.
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Result<Self, GraphError> {
        for &(s, d) in removed {
            if !self.has_edge(s, d) {
                return Err(GraphError::MissingEdge(s, d));
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| !removed.contains(&(e.0, e.1)))
            .copied()
            .collect();
        Ok(Self {
            num_nodes: self.num_nodes,
            edges,
            static_features: self.static_features.clone(),
        })
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut features = vec![Vec::new(); self.num_nodes];
        for (i, row) in self.static_features.iter().enumerate() {
            features[perm[i]] = row.clone();
        }
        Self {
            num_nodes: self.num_nodes,
            edges: self.edges.iter().map(|e| Edge(perm[e.0], perm[e.1], e.2)).collect(),
            static_features: features,
        }
    }
}

/// `D⁻¹M` for a nonnegative square matrix; zero rows stay zero.
pub fn row_normalize(m: &Tensor) -> Result<Tensor, GraphError> {
    let n = *m.shape().last().unwrap_or(&0);
    if let Some(i) = m.data().iter().position(|&v| v < 0.0 || v.is_nan()) {
        return Err(GraphError::NegativeEntry(i / n, i % n));
    }
    Ok(crate::tensor::row_normalized(m))
}

/// The ordered basis of adjacency matrices a relation selector mixes over.
/// The identity is always last.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRelations {
    matrices: Vec<Tensor>,
}

impl CandidateRelations {
    /// `[D⁻¹A, D⁻¹Aᵀ, I]`.
    pub fn from_graph(graph: &TrafficGraph, weighted: bool) -> Self {
        let a = graph.adjacency(weighted);
        let n = graph.num_nodes();
        let mut at = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                at.set(&[j, i], a.at(&[i, j]));
            }
        }
        let fwd = row_normalize(&a).expect("adjacency is nonnegative");
        let rev = row_normalize(&at).expect("adjacency is nonnegative");
        Self {
            matrices: vec![fwd, rev, Tensor::eye(n)],
        }
    }

    /// Candidate set of only the identity.
    pub fn identity_only(n: usize) -> Self {
        Self {
            matrices: vec![Tensor::eye(n)],
        }
    }

    /// Arbitrary candidates; every matrix must be square with equal size.
    pub fn from_matrices(matrices: Vec<Tensor>) -> Result<Self, GraphError> {
        let n = matrices.first().map(|m| m.shape()[0]).unwrap_or(0);
        for m in &matrices {
            if m.shape() != [n, n] {
                return Err(GraphError::Tensor(TensorError::ShapeMismatch {
                    op: "candidate relations",
                    left: vec![n, n],
                    right: m.shape().to_vec(),
                }));
            }
        }
        Ok(Self { matrices })
    }

    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.matrices[0].shape()[0]
    }

    pub fn matrices(&self) -> &[Tensor] {
        &self.matrices
    }

    /// All candidates flattened into one `|𝒜| × N²` matrix.
    pub fn stacked(&self) -> Tensor {
        let n = self.num_nodes();
        let data = self.matrices.iter().flat_map(|m| m.data().iter().copied()).collect();
        Tensor::new(vec![self.len(), n * n], data).expect("consistent candidate shapes")
    }
}

/// `Σ_t softmax(logits)_t · 𝒜_t`, with `stacked` from [`CandidateRelations::stacked`].
pub fn select_relation<'t>(stacked: &Var<'t>, logits: &Var<'t>, num_nodes: usize) -> Result<Var<'t>, TensorError> {
    let k = stacked.shape()[0];
    if logits.shape() != [k] {
        return Err(TensorError::ShapeMismatch {
            op: "select_relation",
            left: vec![k],
            right: logits.shape(),
        });
    }
    logits
        .softmax()?
        .reshape(&[1, k])?
        .matmul(stacked)?
        .reshape(&[num_nodes, num_nodes])
}

/// Composes one adjacency per channel. `slots[i]` holds the logit vectors of
/// channel `i`: the first two select `Q₁`, `Q₂` of the first layer, every
/// further slot selects the matrix right-multiplied onto the running
/// composite by the next layer. Each product is row-normalized.
pub fn compose_relations<'t>(
    stacked: &Var<'t>,
    slots: &[Vec<Var<'t>>],
    num_nodes: usize,
) -> Result<Vec<Var<'t>>, TensorError> {
    slots
        .iter()
        .map(|channel| {
            if channel.len() < 2 {
                return Err(TensorError::InvalidArgument {
                    op: "compose_relations",
                    reason: format!("channel needs at least 2 selection slots, got {}", channel.len()),
                });
            }
            let q1 = select_relation(stacked, &channel[0], num_nodes)?;
            let q2 = select_relation(stacked, &channel[1], num_nodes)?;
            let mut a = q1.matmul(&q2)?.row_normalize()?;
            for logits in &channel[2..] {
                let q = select_relation(stacked, logits, num_nodes)?;
                a = a.matmul(&q)?.row_normalize()?;
            }
            Ok(a)
        })
        .collect()
}

/// `ReLU(D̃⁻¹ (A + I) X' W)`.
pub fn gcn_propagate<'t>(adjacency: &Var<'t>, features: &Var<'t>, weight: &Var<'t>) -> Result<Var<'t>, TensorError> {
    let n = adjacency.shape()[0];
    let eye = adjacency.tape().constant(Tensor::eye(n));
    Ok(adjacency
        .add(&eye)?
        .row_normalize()?
        .matmul(features)?
        .matmul(weight)?
        .relu())
}

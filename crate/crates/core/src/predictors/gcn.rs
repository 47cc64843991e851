//! Single-round graph convolution over the bus network with weighted
//! neighbor messages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;
use crate::neural::{Activation, Dense, Tensor, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Mean,
    Sum,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateOp {
    Concat,
    Add,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "sum" => Ok(Self::Sum),
            "max" => Ok(Self::Max),
            _ => Err(Error::InvalidArgument(format!("unknown aggregation {s:?}"))),
        }
    }
}

impl std::str::FromStr for UpdateOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Self::Concat),
            "add" => Ok(Self::Add),
            _ => Err(Error::InvalidArgument(format!("unknown update op {s:?}"))),
        }
    }
}

/// Weighted adjacency with precomputed neighbor lists (`w_ij > 0`, `i != j`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphWeights {
    n: usize,
    weights: Vec<f64>,
    #[serde(skip)]
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl GraphWeights {
    pub fn from_matrix(n: usize, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != n * n {
            return Err(Error::Dimension { what: "adjacency matrix", expected: n * n, got: weights.len() });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("adjacency weights must be finite and non-negative".into()));
        }
        let mut g = Self { n, weights, neighbors: Vec::new() };
        g.rebuild();
        Ok(g)
    }

    pub fn from_grid(grid: &GridModel) -> Self {
        Self::from_matrix(grid.n_buses(), grid.adjacency_matrix().to_vec()).expect("grid adjacency is validated")
    }

    pub fn empty(n: usize) -> Self {
        Self::from_matrix(n, vec![0.0; n * n]).expect("zero matrix")
    }

    fn rebuild(&mut self) {
        let n = self.n;
        self.neighbors = (0..n)
            .map(|i| (0..n).filter(|&j| j != i && self.weights[i * n + j] > 0.0).map(|j| (j, self.weights[i * n + j])).collect())
            .collect();
    }

    /// Restores neighbor lists after deserialization.
    pub fn restore(mut self) -> Self {
        self.rebuild();
        self
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.weights
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[i]
    }
}

/// Aggregate, combine with the node's own features, then a shared dense
/// transform (identity activation) applied to every node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnLayer {
    pub aggregation: Aggregation,
    pub update: UpdateOp,
    pub in_features: usize,
    pub transform: Dense,
}

/// Saved activations of one batched GCN pass; rows are `(sample, node)`.
#[derive(Debug, Clone)]
pub struct GcnTrace {
    combined: Vec<f64>,
    /// Winning neighbor per `(row, feature)` for max aggregation.
    argmax: Vec<usize>,
    rows: usize,
}

impl GcnLayer {
    pub fn new<R: Rng + ?Sized>(aggregation: Aggregation, update: UpdateOp, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let width = Self::combined_width(update, in_features);
        Self { aggregation, update, in_features, transform: Dense::new(width, out_features, Activation::Identity, rng) }
    }

    pub fn zeros(aggregation: Aggregation, update: UpdateOp, in_features: usize, out_features: usize) -> Self {
        let width = Self::combined_width(update, in_features);
        Self { aggregation, update, in_features, transform: Dense::zeros(width, out_features, Activation::Identity) }
    }

    fn combined_width(update: UpdateOp, f: usize) -> usize {
        match update {
            UpdateOp::Concat => 2 * f,
            UpdateOp::Add => f,
        }
    }

    pub fn out_features(&self) -> usize {
        self.transform.output_size()
    }

    /// Neighbor aggregate for every node of every sample; `x` is node-major
    /// `(batch * n) x f`. Isolated nodes aggregate to zero.
    pub fn aggregate(&self, graph: &GraphWeights, x: &[f64], batch: usize) -> (Vec<f64>, Vec<usize>) {
        let (n, f) = (graph.n_nodes(), self.in_features);
        let mut agg = vec![0.0; batch * n * f];
        let mut argmax = if self.aggregation == Aggregation::Max { vec![usize::MAX; batch * n * f] } else { Vec::new() };
        for b in 0..batch {
            let xb = &x[b * n * f..(b + 1) * n * f];
            for i in 0..n {
                let nb = graph.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let row = (b * n + i) * f;
                let out = &mut agg[row..row + f];
                match self.aggregation {
                    Aggregation::Sum | Aggregation::Mean => {
                        for &(j, w) in nb {
                            out.iter_mut().zip(&xb[j * f..(j + 1) * f]).for_each(|(o, v)| *o += w * v);
                        }
                        if self.aggregation == Aggregation::Mean {
                            let inv = 1.0 / nb.len() as f64;
                            out.iter_mut().for_each(|o| *o *= inv);
                        }
                    }
                    Aggregation::Max => {
                        for k in 0..f {
                            let (mut best, mut arg) = (f64::NEG_INFINITY, usize::MAX);
                            for &(j, w) in nb {
                                let m = w * xb[j * f + k];
                                if m > best {
                                    best = m;
                                    arg = j;
                                }
                            }
                            out[k] = best;
                            argmax[row + k] = arg;
                        }
                    }
                }
            }
        }
        (agg, argmax)
    }

    /// `x` is node-major `(batch * n) x in_features`; returns
    /// `(batch * n) x out_features` plus the trace for backward.
    pub fn forward(&self, graph: &GraphWeights, x: &[f64], batch: usize) -> (Vec<f64>, GcnTrace) {
        let (n, f) = (graph.n_nodes(), self.in_features);
        let rows = batch * n;
        debug_assert_eq!(x.len(), rows * f);
        let (agg, argmax) = self.aggregate(graph, x, batch);
        let combined = match self.update {
            UpdateOp::Add => x.iter().zip(&agg).map(|(a, b)| a + b).collect(),
            UpdateOp::Concat => {
                let mut c = Vec::with_capacity(rows * 2 * f);
                for r in 0..rows {
                    c.extend_from_slice(&x[r * f..(r + 1) * f]);
                    c.extend_from_slice(&agg[r * f..(r + 1) * f]);
                }
                c
            }
        };
        let out = self.transform.forward_batch(&combined, rows);
        (out, GcnTrace { combined, argmax, rows })
    }

    /// Accumulates parameter gradients and returns the gradient on the input.
    pub fn backward(&self, graph: &GraphWeights, trace: &GcnTrace, dout: &[f64], grads: &mut GcnLayer) -> Vec<f64> {
        let (n, f) = (graph.n_nodes(), self.in_features);
        let rows = trace.rows;
        let batch = rows / n;
        let dcomb = self.transform.backward_from_preact(&trace.combined, dout, rows, &mut grads.transform, true).expect("dx requested");
        let mut dx = vec![0.0; rows * f];
        let mut dagg = vec![0.0; rows * f];
        match self.update {
            UpdateOp::Add => {
                dx.copy_from_slice(&dcomb);
                dagg.copy_from_slice(&dcomb);
            }
            UpdateOp::Concat => {
                for r in 0..rows {
                    dx[r * f..(r + 1) * f].copy_from_slice(&dcomb[r * 2 * f..r * 2 * f + f]);
                    dagg[r * f..(r + 1) * f].copy_from_slice(&dcomb[r * 2 * f + f..(r + 1) * 2 * f]);
                }
            }
        }
        for b in 0..batch {
            for i in 0..n {
                let nb = graph.neighbors(i);
                if nb.is_empty() {
                    continue;
                }
                let row = (b * n + i) * f;
                match self.aggregation {
                    Aggregation::Sum | Aggregation::Mean => {
                        let scale = if self.aggregation == Aggregation::Mean { 1.0 / nb.len() as f64 } else { 1.0 };
                        for &(j, w) in nb {
                            let base = (b * n + j) * f;
                            for k in 0..f {
                                dx[base + k] += scale * w * dagg[row + k];
                            }
                        }
                    }
                    Aggregation::Max => {
                        for k in 0..f {
                            let j = trace.argmax[row + k];
                            dx[(b * n + j) * f + k] += graph.weights[i * n + j] * dagg[row + k];
                        }
                    }
                }
            }
        }
        dx
    }
}

impl Trainable for GcnLayer {
    fn params(&self) -> Vec<&Tensor> {
        self.transform.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.transform.params_mut()
    }
}

/// Feature-major flat state (`theta_0..theta_n, omega_0..omega_n`) to
/// node-major rows for a batch.
pub fn to_node_major(flat: &[f64], batch: usize, n: usize, f: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(batch * n * f, 0.0);
    for b in 0..batch {
        let src = &flat[b * n * f..(b + 1) * n * f];
        let dst = &mut out[b * n * f..(b + 1) * n * f];
        for k in 0..f {
            for i in 0..n {
                dst[i * f + k] = src[k * n + i];
            }
        }
    }
}

/// Inverse of [`to_node_major`].
pub fn to_feature_major(nodes: &[f64], batch: usize, n: usize, f: usize, out: &mut Vec<f64>) {
    out.clear();
    out.resize(batch * n * f, 0.0);
    for b in 0..batch {
        let src = &nodes[b * n * f..(b + 1) * n * f];
        let dst = &mut out[b * n * f..(b + 1) * n * f];
        for i in 0..n {
            for k in 0..f {
                dst[k * n + i] = src[i * f + k];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(agg: Aggregation, update: UpdateOp, f: usize) -> GcnLayer {
        let mut l = GcnLayer::zeros(agg, update, f, f);
        let w = l.transform.weights.data_mut();
        for k in 0..f {
            w[k * f + k] = 1.0;
        }
        l
    }

    #[test]
    fn two_node_sum_add() {
        let g = GraphWeights::from_matrix(2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = identity_layer(Aggregation::Sum, UpdateOp::Add, 1);
        let (y, _) = l.forward(&g, &[2.0, 5.0], 1);
        assert_eq!(y, vec![7.0, 7.0]);
    }

    #[test]
    fn max_aggregation_picks_largest_message() {
        let g = GraphWeights::from_matrix(3, vec![0.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let l = identity_layer(Aggregation::Max, UpdateOp::Add, 1);
        let (agg, arg) = l.aggregate(&g, &[0.0, 3.0, 5.0], 1);
        assert_eq!(agg[0], 5.0);
        assert_eq!(arg[0], 2);
    }

    #[test]
    fn isolated_nodes_aggregate_to_zero() {
        let g = GraphWeights::empty(4);
        for agg in [Aggregation::Mean, Aggregation::Sum, Aggregation::Max] {
            let l = identity_layer(agg, UpdateOp::Add, 2);
            let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
            let (a, _) = l.aggregate(&g, &x, 1);
            assert!(a.iter().all(|v| *v == 0.0));
            let (y, _) = l.forward(&g, &x, 1);
            assert_eq!(y, x);
        }
    }

    #[test]
    fn layout_round_trip() {
        let flat: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let (mut nodes, mut back) = (Vec::new(), Vec::new());
        to_node_major(&flat, 2, 10, 2, &mut nodes);
        assert_eq!(nodes[0..4], [0.0, 10.0, 1.0, 11.0]);
        to_feature_major(&nodes, 2, 10, 2, &mut back);
        assert_eq!(back, flat);
    }
}

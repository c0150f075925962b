//! Connectivity matrices, their edge-vector encoding, and weighted-graph
//! node metrics.
//!
//! Edge vectors hold the strict upper triangle in row-major order:
//! `(0,1), (0,2), …, (0,r-1), (1,2), …, (r-2,r-1)`.

use serde::{Deserialize, Serialize};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

const SYMMETRY_TOLERANCE: f64 = 1e-9;
const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 10_000;

pub const DEFAULT_DAMPING: f64 = 0.85;

/// Number of strict-upper-triangle entries of an `r×r` matrix.
pub fn edge_count(nodes: usize) -> usize {
    nodes * nodes.saturating_sub(1) / 2
}

/// Inverse of [`edge_count`], if `edges` is triangular.
pub fn nodes_for_edges(edges: usize) -> Option<usize> {
    let r = ((1.0 + (1.0 + 8.0 * edges as f64).sqrt()) / 2.0).round() as usize;
    (edge_count(r) == edges).then_some(r)
}

/// Symmetric, zero-diagonal weighted adjacency matrix of a brain graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ConnectivityMatrix {
    weights: Tensor,
}

impl ConnectivityMatrix {
    /// Validates symmetry (within 1e-9) and the zero diagonal.
    pub fn new(weights: Tensor) -> Result<Self> {
        let (r, c) = weights.shape();
        if r != c {
            return Err(Error::Contract(format!(
                "connectivity matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            if weights.get(i, i) != 0.0 {
                return Err(Error::Contract(format!(
                    "connectivity matrix has nonzero diagonal at ({i},{i})"
                )));
            }
            for j in (i + 1)..r {
                let (a, b) = (weights.get(i, j), weights.get(j, i));
                if !((a - b).abs() <= SYMMETRY_TOLERANCE) {
                    return Err(Error::Contract(format!(
                        "connectivity matrix is asymmetric at ({i},{j}): {a} vs {b}"
                    )));
                }
            }
        }
        Ok(ConnectivityMatrix { weights })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Tensor::from_rows(rows)?)
    }

    pub fn zeros(nodes: usize) -> Self {
        ConnectivityMatrix {
            weights: Tensor::zeros(nodes, nodes),
        }
    }

    pub fn nodes(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor {
        self.weights
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.weights.get(i, j)
    }

    /// Copy with negative weights replaced by zero.
    pub fn clamp_negative(&self) -> Self {
        ConnectivityMatrix {
            weights: self.weights.map(|w| w.max(0.0)),
        }
    }

    /// Relabels nodes: node `i` of the result is node `perm[i]` of `self`.
    pub fn permute(&self, perm: &[usize]) -> Self {
        let w = &self.weights;
        ConnectivityMatrix {
            weights: Tensor::from_fn(w.rows(), w.cols(), |i, j| w.get(perm[i], perm[j])),
        }
    }
}

pub fn vectorize(matrix: &ConnectivityMatrix) -> Vec<f64> {
    let r = matrix.nodes();
    let mut out = Vec::with_capacity(edge_count(r));
    for i in 0..r {
        out.extend_from_slice(&matrix.weights.row(i)[i + 1..]);
    }
    out
}

pub fn antivectorize(edges: &[f64], nodes: usize) -> Result<ConnectivityMatrix> {
    if edges.len() != edge_count(nodes) {
        return Err(Error::Contract(format!(
            "a {nodes}-node graph has {} edges, got a vector of length {}",
            edge_count(nodes),
            edges.len()
        )));
    }
    let mut w = Tensor::zeros(nodes, nodes);
    let mut e = 0;
    for i in 0..nodes {
        for j in (i + 1)..nodes {
            w.set(i, j, edges[e]);
            w.set(j, i, edges[e]);
            e += 1;
        }
    }
    Ok(ConnectivityMatrix { weights: w })
}

/// Row sums divided by their L1 norm (the plain total for non-negative
/// weights). An all-zero graph maps to uniform `1/r`.
pub fn node_strength(matrix: &ConnectivityMatrix) -> Vec<f64> {
    let r = matrix.nodes();
    let sums: Vec<f64> = matrix.weights.row_iter().map(|row| row.iter().sum()).collect();
    let total: f64 = sums.iter().map(|s| s.abs()).sum();
    if total == 0.0 {
        return vec![1.0 / r as f64; r];
    }
    sums.into_iter().map(|s| s / total).collect()
}

/// Principal eigenvector of a non-negative symmetric matrix, unit L2 norm,
/// non-negative entries.
///
/// Iterates on `A + cI` with `c` the largest row sum: the shift keeps the
/// eigenvectors, and makes the Perron eigenvalue strictly dominant in
/// magnitude, so bipartite graphs converge instead of oscillating.
pub fn eigenvector_centrality(matrix: &ConnectivityMatrix) -> Vec<f64> {
    let r = matrix.nodes();
    let w = &matrix.weights;
    let shift = w
        .row_iter()
        .map(|row| row.iter().sum::<f64>())
        .fold(0.0, f64::max);
    if r == 0 {
        return vec![];
    }
    if shift <= 0.0 {
        return vec![1.0 / (r as f64).sqrt(); r];
    }
    let mut x = vec![1.0 / r as f64; r];
    normalize_l2(&mut x);
    let mut next = vec![0.0; r];
    for _ in 0..POWER_MAX_ITERS {
        for (i, out) in next.iter_mut().enumerate() {
            let row = w.row(i);
            *out = shift * x[i] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        }
        normalize_l2(&mut next);
        let delta = max_abs_delta(&x, &next);
        std::mem::swap(&mut x, &mut next);
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    x
}

/// Stationary distribution of the damped walk whose transitions are the
/// row-normalized weights; rows without outgoing weight jump uniformly.
pub fn pagerank(matrix: &ConnectivityMatrix, damping: f64) -> Vec<f64> {
    let r = matrix.nodes();
    if r == 0 {
        return vec![];
    }
    let w = &matrix.weights;
    let out_weight: Vec<f64> = w.row_iter().map(|row| row.iter().sum()).collect();
    let uniform = 1.0 / r as f64;
    let mut x = vec![uniform; r];
    let mut next = vec![0.0; r];
    for _ in 0..POWER_MAX_ITERS {
        let dangling: f64 = (0..r).filter(|&i| out_weight[i] <= 0.0).map(|i| x[i]).sum();
        let base = (1.0 - damping) * uniform + damping * dangling * uniform;
        next.fill(base);
        for i in 0..r {
            if out_weight[i] <= 0.0 {
                continue;
            }
            let share = damping * x[i] / out_weight[i];
            for (n, wij) in next.iter_mut().zip(w.row(i)) {
                *n += share * wij;
            }
        }
        let delta = max_abs_delta(&x, &next);
        std::mem::swap(&mut x, &mut next);
        if delta < POWER_TOLERANCE {
            break;
        }
    }
    x
}

fn normalize_l2(x: &mut [f64]) {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        x.iter_mut().for_each(|v| *v /= norm);
    }
}

fn max_abs_delta(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    NodeStrength,
    EigenvectorCentrality,
    PageRank { damping: f64 },
}

impl Metric {
    pub fn apply(&self, matrix: &ConnectivityMatrix) -> Vec<f64> {
        match *self {
            Metric::NodeStrength => node_strength(matrix),
            Metric::EigenvectorCentrality => eigenvector_centrality(matrix),
            Metric::PageRank { damping } => pagerank(matrix, damping),
        }
    }
}

/// Applies `metric` to every subject row of a feature matrix; the result is
/// `n_subjects × r`.
pub fn batch_metric(features: &Tensor, nodes: usize, metric: Metric) -> Result<Tensor> {
    let mut out = Tensor::zeros(features.rows(), nodes);
    for (s, row) in features.row_iter().enumerate() {
        let m = antivectorize(row, nodes)?;
        out.row_mut(s).copy_from_slice(&metric.apply(&m));
    }
    Ok(out)
}

/// Stacks the edge vectors of several matrices into an `n × r(r-1)/2`
/// feature matrix.
pub fn feature_matrix(matrices: &[ConnectivityMatrix]) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = matrices.iter().map(vectorize).collect();
    Tensor::from_rows(&rows)
}

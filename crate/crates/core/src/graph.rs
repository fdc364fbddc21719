//! Per-trial functional-connectivity graphs and node metrics.
//!
//! A trial's graph has one node per electrode and edge weights equal to the
//! absolute Pearson correlation between the electrodes' epochs. Three node
//! metrics are extracted per electrode: strength (mean edge weight),
//! eigenvector centrality (leading-eigenvector component by power iteration)
//! and the weighted clustering coefficient with `k_i = L - 1` since the
//! graph is never thresholded.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::stats::pearson;

/// Symmetric nonnegative connectivity matrix with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct ConnectivityGraph {
    weights: Array2<f64>,
}

impl ConnectivityGraph {
    /// Wrap a precomputed weight matrix, enforcing the invariants.
    pub fn from_weights(weights: Array2<f64>) -> Result<Self> {
        if weights.nrows() != weights.ncols() {
            return Err(Error::InvalidInput("connectivity matrix must be square".into()));
        }
        let l = weights.nrows();
        for i in 0..l {
            if weights[[i, i]] != 0.0 {
                return Err(Error::InvalidInput(format!("nonzero diagonal at node {i}")));
            }
            for j in (i + 1)..l {
                let w = weights[[i, j]];
                if w != weights[[j, i]] {
                    return Err(Error::InvalidInput(format!("asymmetric weights at ({i},{j})")));
                }
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::InvalidInput(format!(
                        "weight {w} at ({i},{j}) outside [0,1]"
                    )));
                }
            }
        }
        Ok(Self { weights })
    }

    pub fn len(&self) -> usize {
        self.weights.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    /// True when every edge weight is exactly zero.
    pub fn is_degenerate(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }
}

/// Build the connectivity graph for a single trial. Rows of `epochs` are
/// electrodes, columns are samples; all rows must share the trial.
pub fn trial_connectivity(epochs: ArrayView2<f64>) -> Result<ConnectivityGraph> {
    let l = epochs.nrows();
    if l < 2 {
        return Err(Error::InvalidInput(format!(
            "connectivity needs at least 2 electrodes, got {l}"
        )));
    }
    let mut w = Array2::zeros((l, l));
    // one Pearson evaluation per unordered pair, mirrored for exact symmetry
    for i in 0..l {
        let a = epochs.row(i);
        let a = a.as_slice().expect("contiguous row");
        for j in (i + 1)..l {
            let b = epochs.row(j);
            let r = pearson(a, b.as_slice().expect("contiguous row")).abs();
            w[[i, j]] = r;
            w[[j, i]] = r;
        }
    }
    ConnectivityGraph::from_weights(w)
}

/// Mean edge weight per node: `S(i) = 1/(L-1) * sum_{j != i} w_ij`.
pub fn node_strength(graph: &ConnectivityGraph) -> Result<Vec<f64>> {
    let l = graph.len();
    if l < 2 {
        return Err(Error::InvalidInput("node strength needs L >= 2".into()));
    }
    let w = graph.weights();
    Ok((0..l)
        .map(|i| w.row(i).sum() / (l - 1) as f64)
        .collect())
}

/// Result of the power iteration for eigenvector centrality.
#[derive(Debug, Clone)]
pub struct EigenCentrality {
    /// Unit-L2-norm nonnegative leading eigenvector.
    pub values: Vec<f64>,
    /// Leading eigenvalue estimate (Rayleigh quotient).
    pub eigenvalue: f64,
    /// False when the residual tolerance was not reached in `max_iters`.
    pub converged: bool,
    pub residual: f64,
}

/// Leading-eigenvector centrality by power iteration from a uniform start.
///
/// Iterates on `W + I`: the shift leaves eigenvectors unchanged but makes
/// the Perron eigenvalue strictly dominant in magnitude, so bipartite-like
/// weight patterns (where `-lambda_max` is also an eigenvalue) cannot stall
/// the iteration. An all-zero graph is an error and callers substitute the
/// uniform vector.
pub fn eigenvector_centrality(
    graph: &ConnectivityGraph,
    tol: f64,
    max_iters: usize,
) -> Result<EigenCentrality> {
    if graph.is_degenerate() {
        return Err(Error::DegenerateGraph);
    }
    let w = graph.weights();
    let l = graph.len();
    let mut v = Array1::from_elem(l, 1.0 / (l as f64).sqrt());
    let mut lambda = 0.0;
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..max_iters {
        let wv = w.dot(&v);
        lambda = v.dot(&wv);
        residual = (&wv - &(&v * lambda)).mapv(|x| x * x).sum().sqrt();
        if residual < tol {
            converged = true;
            break;
        }
        let shifted = wv + &v;
        let norm = shifted.dot(&shifted).sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateGraph);
        }
        v = shifted / norm;
    }
    Ok(EigenCentrality {
        values: v.mapv(f64::abs).to_vec(),
        eigenvalue: lambda,
        converged,
        residual,
    })
}

/// Weighted clustering coefficient per node:
/// `C_i = sum_{j,k} (w_ij w_ik w_jk)^{1/3} / (k_i (k_i - 1))` with
/// `k_i = L - 1` and the ordered double sum over `j != i, k != i, j != k`.
///
/// With `U = W^(1/3)` elementwise (zero diagonal), the ordered sum equals
/// `(U^3)_ii` exactly, which is what is computed here; tests check it
/// against the naive triple loop.
pub fn clustering_coefficient(graph: &ConnectivityGraph) -> Result<Vec<f64>> {
    let l = graph.len();
    if l < 3 {
        return Err(Error::InvalidInput(format!(
            "clustering coefficient needs L >= 3, got {l}"
        )));
    }
    let u = graph.weights().mapv(f64::cbrt);
    let u2 = u.dot(&u);
    let denom = ((l - 1) * (l - 2)) as f64;
    Ok((0..l)
        .map(|i| u.row(i).dot(&u2.column(i)) / denom)
        .collect())
}

/// Per-node metrics of one trial graph with the documented degenerate-graph
/// fallback: uniform centrality `1/sqrt(L)`, zero strength and clustering.
#[derive(Debug, Clone)]
pub struct NodeMetrics {
    pub strength: Vec<f64>,
    pub centrality: Vec<f64>,
    pub clustering: Vec<f64>,
}

pub fn node_metrics(graph: &ConnectivityGraph, tol: f64, max_iters: usize) -> Result<NodeMetrics> {
    let l = graph.len();
    let strength = node_strength(graph)?;
    let clustering = clustering_coefficient(graph)?;
    let centrality = match eigenvector_centrality(graph, tol, max_iters) {
        Ok(ec) => ec.values,
        Err(Error::DegenerateGraph) => vec![1.0 / (l as f64).sqrt(); l],
        Err(e) => return Err(e),
    };
    Ok(NodeMetrics {
        strength,
        centrality,
        clustering,
    })
}

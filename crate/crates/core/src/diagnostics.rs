//! Sampled item-item graphs, their algebraic connectivity, and modularity.
//!
//! Sampling keeps, for each item, the `k` neighbors with the largest weight
//!
//! ```text
//! ω_ij = Q_ij / sqrt(p_j) · sqrt(p_i) / (p_i − Q_ii),   p_i = Σ_k Q_ik,   Q = RᵀR
//! ```
//!
//! and the per-row selections are then symmetrized for Laplacian analysis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::{self, SolverOptions, SymOperator};
use crate::error::{Error, Result};
use crate::sparse::InteractionMatrix;

/// Graphs up to this many nodes are solved with a dense eigendecomposition.
const DENSE_LIMIT: usize = 1500;
const LANCZOS_DIM: usize = 120;

/// Row sums `p_i` of the unnormalized co-occurrence matrix.
fn cooccurrence_row_sums(m: &InteractionMatrix) -> Vec<f64> {
    (0..m.n_items())
        .map(|i| m.col(i).iter().map(|&u| m.user_degrees()[u as usize]).sum())
        .collect()
}

fn omega_from(q_ij: f64, p_i: f64, p_j: f64, q_ii: f64) -> f64 {
    q_ij / p_j.sqrt() * p_i.sqrt() / (p_i - q_ii)
}

/// Sampling weight of the pair `(i, j)`.
pub fn omega(m: &InteractionMatrix, i: usize, j: usize) -> Result<f64> {
    if i == j || i >= m.n_items() || j >= m.n_items() {
        return Err(Error::InvalidArgument(format!("omega needs two distinct items in range, got ({i}, {j})")));
    }
    let p_i: f64 = m.col(i).iter().map(|&u| m.user_degrees()[u as usize]).sum();
    let p_j: f64 = m.col(j).iter().map(|&u| m.user_degrees()[u as usize]).sum();
    let q_ii = m.item_degrees()[i];
    if p_i <= q_ii {
        return Err(Error::OmegaUndefined { item: i });
    }
    let (ci, cj) = (m.col(i), m.col(j));
    let q_ij = ci.iter().filter(|u| cj.binary_search(u).is_ok()).count() as f64;
    Ok(omega_from(q_ij, p_i, p_j, q_ii))
}

/// Undirected weighted graph as symmetric CSR.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<u32>,
    weights: Vec<f64>,
}

impl WeightedGraph {
    /// Each `(i, j, w)` sets `A_ij = A_ji = w` (repeated pairs add up).
    pub fn from_edges(n: usize, edges: &[(u32, u32, f64)]) -> Result<Self> {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(i, j, w) in edges {
            if i as usize >= n || j as usize >= n {
                return Err(Error::InvalidArgument(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            rows[i as usize].push((j, w));
            if i != j {
                rows[j as usize].push((i, w));
            }
        }
        Ok(Self::from_rows(rows, |a, b| a + b))
    }

    fn from_rows(rows: Vec<Vec<(u32, f64)>>, merge: impl Fn(f64, f64) -> f64) -> Self {
        let n = rows.len();
        let mut g = Self {
            n,
            indptr: Vec::with_capacity(n + 1),
            indices: Vec::new(),
            weights: Vec::new(),
        };
        g.indptr.push(0);
        for mut row in rows {
            row.sort_unstable_by_key(|e| e.0);
            let start = g.indices.len();
            for (j, w) in row {
                if g.indices.len() > start && *g.indices.last().unwrap() == j {
                    let last = g.weights.last_mut().unwrap();
                    *last = merge(*last, w);
                } else {
                    g.indices.push(j);
                    g.weights.push(w);
                }
            }
            g.indptr.push(g.indices.len());
        }
        g
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    /// Stored entries (each undirected edge twice, self-loops once).
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.weights[r])
    }

    pub fn degrees(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.row(i).1.iter().sum()).collect()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, ws) = self.row(i);
            for (&j, &w) in cols.iter().zip(ws) {
                a[(i, j as usize)] = w;
            }
        }
        a
    }
}

/// How directed top-k selections become an undirected graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Symmetrization {
    /// Edge present if either direction was kept; weight is the larger of the two.
    #[default]
    Union,
    /// `A + Aᵀ`: both directed weights are added.
    DirectedSum,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledItemGraph {
    pub k_neighbors: usize,
    /// Kept neighbors per item with their ω, before symmetrization.
    pub directed: Vec<Vec<(u32, f64)>>,
    pub graph: WeightedGraph,
}

/// All positive-weight neighbors of every item, with ω, unordered.
fn omega_rows(m: &InteractionMatrix) -> Vec<Vec<(u32, f64)>> {
    let n = m.n_items();
    let p = cooccurrence_row_sums(m);
    (0..n)
        .into_par_iter()
        .map_init(
            || (vec![0u32; n], Vec::new()),
            |(counts, touched), i| {
                for &u in m.col(i) {
                    for &j in m.row(u as usize) {
                        if j as usize != i {
                            if counts[j as usize] == 0 {
                                touched.push(j);
                            }
                            counts[j as usize] += 1;
                        }
                    }
                }
                let q_ii = m.item_degrees()[i];
                let row = touched
                    .iter()
                    .map(|&j| (j, omega_from(counts[j as usize] as f64, p[i], p[j as usize], q_ii)))
                    .collect();
                for &j in touched.iter() {
                    counts[j as usize] = 0;
                }
                touched.clear();
                row
            },
        )
        .collect()
}

/// Per item, keep the `k_neighbors` largest ω (ties by ascending item id),
/// then symmetrize.
pub fn sample_graph(m: &InteractionMatrix, k_neighbors: usize, mode: Symmetrization) -> Result<SampledItemGraph> {
    if k_neighbors == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be >= 1".into()));
    }
    let directed: Vec<Vec<(u32, f64)>> = omega_rows(m)
        .into_par_iter()
        .map(|mut row| {
            row.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            row.truncate(k_neighbors);
            row
        })
        .collect();
    Ok(SampledItemGraph {
        k_neighbors,
        graph: symmetrize(&directed, mode),
        directed,
    })
}

fn symmetrize(directed: &[Vec<(u32, f64)>], mode: Symmetrization) -> WeightedGraph {
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); directed.len()];
    for (i, row) in directed.iter().enumerate() {
        for &(j, w) in row {
            rows[i].push((j, w));
            rows[j as usize].push((i as u32, w));
        }
    }
    match mode {
        Symmetrization::Union => WeightedGraph::from_rows(rows, f64::max),
        Symmetrization::DirectedSum => WeightedGraph::from_rows(rows, |a, b| a + b),
    }
}

/// `I + D^{-1/2} A D^{-1/2}`: PSD with eigenvalues `2 − λ(L)`.
struct ShiftedAdjacency<'g> {
    graph: &'g WeightedGraph,
    inv_sqrt: Vec<f64>,
}

impl SymOperator for ShiftedAdjacency<'_> {
    fn dim(&self) -> usize {
        self.graph.n
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.graph.n;
        let mut out = x.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            let xc = x.column(c);
            let acc: Vec<f64> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let (cols, ws) = self.graph.row(i);
                    self.inv_sqrt[i] * cols.iter().zip(ws).map(|(&j, &w)| w * self.inv_sqrt[j as usize] * xc[j as usize]).sum::<f64>()
                })
                .collect();
            for (o, a) in col.iter_mut().zip(acc) {
                *o += a;
            }
        }
        out
    }
}

/// Second-smallest eigenvalue of the normalized Laplacian
/// `I − D^{-1/2} A D^{-1/2}`. Isolated nodes make the graph disconnected, so
/// the value is 0.
pub fn connectivity(g: &WeightedGraph, opts: &SolverOptions) -> Result<f64> {
    let n = g.n_nodes();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("connectivity needs at least 2 nodes, got {n}")));
    }
    let degrees = g.degrees();
    if degrees.iter().any(|&d| d <= 0.0) {
        return Ok(0.0);
    }
    let inv_sqrt: Vec<f64> = degrees.iter().map(|d| 1.0 / d.sqrt()).collect();
    if n <= DENSE_LIMIT {
        let a = g.to_dense();
        let lap = DMatrix::from_fn(n, n, |i, j| {
            let eye = if i == j { 1.0 } else { 0.0 };
            eye - inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]
        });
        let mut values: Vec<f64> = SymmetricEigen::new(lap).eigenvalues.iter().copied().collect();
        values.sort_by(f64::total_cmp);
        return Ok(values[1].max(0.0));
    }
    let trivial = DVector::from_iterator(n, degrees.iter().map(|d| d.sqrt()));
    let trivial = &trivial / trivial.norm();
    let op = ShiftedAdjacency { graph: g, inv_sqrt };
    let (theta, _) = eigen::lanczos_top(&op, &[trivial], 2.0, LANCZOS_DIM, opts)?;
    Ok((2.0 - theta).max(0.0))
}

/// `(1/2W) Σ_ij [A_ij − d_i d_j / 2W] · 1[c_i = c_j]`, with `2W = Σ_ij A_ij`.
pub fn modularity(g: &WeightedGraph, communities: &[u32]) -> Result<f64> {
    let n = g.n_nodes();
    if communities.len() != n {
        return Err(Error::ShapeError(format!("{} community labels for {n} nodes", communities.len())));
    }
    let degrees = g.degrees();
    let two_w: f64 = degrees.iter().sum();
    if two_w <= 0.0 {
        return Err(Error::ModularityUndefined);
    }
    let mut internal = 0.0;
    for i in 0..n {
        let (cols, ws) = g.row(i);
        for (&j, &w) in cols.iter().zip(ws) {
            if communities[i] == communities[j as usize] {
                internal += w;
            }
        }
    }
    let n_comm = communities.iter().map(|&c| c as usize + 1).max().unwrap_or(0);
    let mut volume = vec![0.0; n_comm];
    for (i, &c) in communities.iter().enumerate() {
        volume[c as usize] += degrees[i];
    }
    let expected: f64 = volume.iter().map(|v| v * v).sum::<f64>() / two_w;
    Ok((internal - expected) / two_w)
}

/// One point of the connectivity-vs-neighbors curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConnectivityPoint {
    pub k_neighbors: usize,
    pub fiedler_value: f64,
}

/// Connectivity of the sampled graph for every `k` in `k_min..=k_max`.
pub fn connectivity_curve(
    m: &InteractionMatrix,
    k_min: usize,
    k_max: usize,
    mode: Symmetrization,
    opts: &SolverOptions,
) -> Result<Vec<ConnectivityPoint>> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::InvalidArgument(format!("bad neighbor range {k_min}..={k_max}")));
    }
    let mut rows = omega_rows(m);
    rows.par_iter_mut()
        .for_each(|row| row.sort_unstable_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))));
    (k_min..=k_max)
        .map(|k| {
            let directed: Vec<Vec<(u32, f64)>> = rows.iter().map(|r| r[..k.min(r.len())].to_vec()).collect();
            let g = symmetrize(&directed, mode);
            Ok(ConnectivityPoint {
                k_neighbors: k,
                fiedler_value: connectivity(&g, opts)?,
            })
        })
        .collect()
}

pub fn curve_csv(points: &[ConnectivityPoint]) -> String {
    let mut out = String::from("k_neighbors,fiedler_value\n");
    for p in points {
        out.push_str(&format!("{},{:.12e}\n", p.k_neighbors, p.fiedler_value));
    }
    out
}

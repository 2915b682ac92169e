//! Truncated SVD of the normalized interaction matrix and the global
//! low-rank item similarity `W = D_I^{-1/2} V Vᵀ D_I^{1/2}` built from it.
//!
//! Right singular vectors of `R̃` are eigenvectors of `Q̃ = R̃ᵀR̃`, so every
//! solve here runs on the implicit operator `X ↦ R̃ᵀ(R̃X)` over CSR and never
//! forms `Q̃`. When the operator is restricted to an item subset, user degrees
//! are recomputed on the restricted columns; item degrees are unchanged by
//! construction since every user is kept.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::eigen::{self, SolverOptions, SymOperator};
use crate::error::{Error, Result};
use crate::sparse::{InteractionMatrix, NormalizedView, SubMatrix};

/// `Q̃ = R̃ᵀR̃` for the column subset, applied through CSR.
pub(crate) struct NormalizedGram {
    sub: SubMatrix,
    row_scale: Vec<f64>,
    col_scale: Vec<f64>,
}

impl NormalizedGram {
    pub(crate) fn new(m: &InteractionMatrix, items: &[u32]) -> Result<Self> {
        let sub = m.restrict(items)?;
        let row_scale = (0..sub.n_rows())
            .map(|u| match sub.row_degree(u) {
                0 => 0.0,
                d => 1.0 / (d as f64).sqrt(),
            })
            .collect();
        let col_scale = (0..sub.n_cols())
            .map(|c| match sub.col_degree(c) {
                0 => Err(Error::DegreeZero {
                    axis: "item",
                    index: items[c] as usize,
                }),
                d => Ok(1.0 / (d as f64).sqrt()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            sub,
            row_scale,
            col_scale,
        })
    }

    /// Unit eigenvector for eigenvalue 1: proportional to `sqrt(item degree)`.
    pub(crate) fn trivial_vector(&self) -> DVector<f64> {
        let v = DVector::from_iterator(self.col_scale.len(), self.col_scale.iter().map(|s| 1.0 / s));
        let norm = v.norm();
        v / norm
    }

    fn apply_column(&self, x: &[f64], out: &mut [f64], scratch: &mut [f64]) {
        for (u, y) in scratch.iter_mut().enumerate() {
            let s = self.row_scale[u];
            *y = if s == 0.0 {
                0.0
            } else {
                s * self.sub.row(u).iter().map(|&c| self.col_scale[c as usize] * x[c as usize]).sum::<f64>()
            };
        }
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.col_scale[c] * self.sub.col(c).iter().map(|&u| self.row_scale[u as usize] * scratch[u as usize]).sum::<f64>();
        }
    }
}

impl SymOperator for NormalizedGram {
    fn dim(&self) -> usize {
        self.sub.n_cols()
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, b) = x.shape();
        let mut out = DMatrix::zeros(n, b);
        out.as_mut_slice()
            .par_chunks_mut(n.max(1))
            .zip(x.as_slice().par_chunks(n.max(1)))
            .for_each_init(
                || vec![0.0; self.sub.n_rows()],
                |scratch, (o, xc)| self.apply_column(xc, o, scratch),
            );
        out
    }
}

/// Top-`k` right singular vectors of `R̃` over an item list, plus the degree
/// scalings that turn them into `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBasis {
    items: Vec<u32>,
    v: DMatrix<f64>,
    sigma: Vec<f64>,
    d_inv_sqrt: Vec<f64>,
    d_sqrt: Vec<f64>,
}

impl SpectralBasis {
    /// Reassemble a basis from stored parts (model loading).
    pub fn from_parts(items: Vec<u32>, v: DMatrix<f64>, sigma: Vec<f64>, d_inv_sqrt: Vec<f64>, d_sqrt: Vec<f64>) -> Result<Self> {
        let n = items.len();
        if v.nrows() != n || v.ncols() != sigma.len() || d_inv_sqrt.len() != n || d_sqrt.len() != n {
            return Err(Error::ShapeError(format!(
                "basis over {n} items has V {}x{}, {} singular values, scalings {}/{}",
                v.nrows(),
                v.ncols(),
                sigma.len(),
                d_inv_sqrt.len(),
                d_sqrt.len()
            )));
        }
        Ok(Self {
            items,
            v,
            sigma,
            d_inv_sqrt,
            d_sqrt,
        })
    }

    pub fn items(&self) -> &[u32] {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn k(&self) -> usize {
        self.sigma.len()
    }

    /// `n_items x k`, orthonormal columns.
    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn d_inv_sqrt(&self) -> &[f64] {
        &self.d_inv_sqrt
    }

    pub fn d_sqrt(&self) -> &[f64] {
        &self.d_sqrt
    }

    /// Dense block of `W` for basis-local positions: entry `(a, b)` is
    /// `d_a^{-1/2} (V_a · V_b) d_b^{1/2}`.
    pub fn w_block(&self, positions: &[usize]) -> DMatrix<f64> {
        let k = self.k();
        let left = DMatrix::from_fn(positions.len(), k, |r, c| self.d_inv_sqrt[positions[r]] * self.v[(positions[r], c)]);
        let right = DMatrix::from_fn(k, positions.len(), |r, c| self.v[(positions[c], r)] * self.d_sqrt[positions[c]]);
        left * right
    }

    /// `r_u W` for a sparse row given as `(basis position, value)` pairs.
    pub fn score(&self, user_row: &[(u32, f64)]) -> Result<Vec<f64>> {
        let n = self.n_items();
        let mut t = DVector::<f64>::zeros(self.k());
        for &(i, val) in user_row {
            let i = i as usize;
            if i >= n {
                return Err(Error::ShapeError(format!("row index {i} outside basis of {n} items")));
            }
            t.axpy(val * self.d_inv_sqrt[i], &self.v.row(i).transpose(), 1.0);
        }
        let proj = &self.v * t;
        Ok(proj.iter().zip(&self.d_sqrt).map(|(p, d)| p * d).collect())
    }

    /// `T = R_b D^{-1/2} V` for a batch of sparse rows; `T Vᵀ ⊙ d_sqrt` are the scores.
    pub(crate) fn project_rows(&self, rows: &[&[(u32, f64)]]) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(rows.len(), self.k());
        for (r, row) in rows.iter().enumerate() {
            for &(i, val) in row.iter() {
                let i = i as usize;
                let w = val * self.d_inv_sqrt[i];
                for c in 0..self.k() {
                    t[(r, c)] += w * self.v[(i, c)];
                }
            }
        }
        t
    }
}

/// `score_global` as a free function over a basis built on `items`.
pub fn score_global(basis: &SpectralBasis, user_row: &[(u32, f64)]) -> Result<Vec<f64>> {
    basis.score(user_row)
}

/// Top-`k` right singular triplets of `R̃` restricted to `items`.
pub fn truncated_svd(view: &NormalizedView<'_>, items: &[u32], k: usize, opts: &SolverOptions) -> Result<SpectralBasis> {
    let m = view.matrix();
    if k == 0 || k > items.len() || k > m.n_users() {
        return Err(Error::InvalidArgument(format!(
            "rank {k} must be in 1..=min(n_users = {}, items = {})",
            m.n_users(),
            items.len()
        )));
    }
    let op = NormalizedGram::new(m, items)?;
    let pairs = eigen::subspace_iteration(&op, k, &[], 1.0, opts)?;
    log::debug!("truncated svd: k = {k} after {} iterations", pairs.iterations);
    let mut v = pairs.vectors;
    eigen::canonicalize_clusters(&pairs.values, &mut v, 1e-10);
    eigen::canonicalize_signs(&mut v);
    let sigma = pairs.values.iter().map(|&t| t.max(0.0).sqrt()).collect();
    let degrees = m.item_degrees();
    Ok(SpectralBasis {
        items: items.to_vec(),
        v,
        sigma,
        d_inv_sqrt: items.iter().map(|&i| 1.0 / degrees[i as usize].sqrt()).collect(),
        d_sqrt: items.iter().map(|&i| degrees[i as usize].sqrt()).collect(),
    })
}

/// Second right singular vector of the restricted `R̃`, i.e. the Fiedler
/// vector of `I − Q̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiedlerResult {
    /// Algebraic connectivity `1 − σ₂²`.
    pub value: f64,
    pub sigma: f64,
    /// Unit norm, aligned with the item list it was computed over.
    pub vector: Vec<f64>,
}

/// The leading right singular vector of `R̃` is known in closed form
/// (`∝ sqrt(item degree)`, singular value 1), so the solve deflates it and
/// extracts the top eigenpair of the remainder.
pub fn fiedler(view: &NormalizedView<'_>, items: &[u32], opts: &SolverOptions) -> Result<FiedlerResult> {
    if items.len() < 2 {
        return Err(Error::InvalidArgument(format!("Fiedler vector needs at least 2 items, got {}", items.len())));
    }
    let op = NormalizedGram::new(view.matrix(), items)?;
    let trivial = op.trivial_vector();
    let pairs = eigen::subspace_iteration(&op, 1, &[trivial], 1.0, opts)?;
    let mut v = pairs.vectors;
    eigen::canonicalize_signs(&mut v);
    let theta = pairs.values[0].clamp(0.0, 1.0);
    Ok(FiedlerResult {
        value: 1.0 - theta,
        sigma: theta.sqrt(),
        vector: v.column(0).iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::InteractionMatrix;

    fn all_items(m: &InteractionMatrix) -> Vec<u32> {
        (0..m.n_items() as u32).collect()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let view = NormalizedView::new(&m).unwrap();
        let b = truncated_svd(&view, &all_items(&m), 2, &SolverOptions::default()).unwrap();
        for s in b.sigma() {
            assert!((s - 1.0).abs() < 1e-12);
        }
        // Signed permutation of I: every entry is 0 or ±1.
        for x in b.v().iter() {
            assert!(x.abs() < 1e-12 || (x.abs() - 1.0).abs() < 1e-12, "{x}");
        }
    }

    #[test]
    fn rank_larger_than_users_is_rejected() {
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 1, 1]]).unwrap();
        let view = NormalizedView::new(&m).unwrap();
        assert!(matches!(
            truncated_svd(&view, &all_items(&m), 2, &SolverOptions::default()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn disconnected_groups_have_zero_connectivity() {
        let m = InteractionMatrix::from_dense_rows(&[
            vec![1, 1, 0, 0],
            vec![1, 1, 0, 0],
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 0],
        ])
        .unwrap();
        let view = NormalizedView::new(&m).unwrap();
        let f = fiedler(&view, &all_items(&m), &SolverOptions::default()).unwrap();
        assert!(f.value.abs() < 1e-10, "{}", f.value);
        assert_eq!(f.vector[0].signum(), f.vector[1].signum());
        assert_eq!(f.vector[2].signum(), f.vector[3].signum());
        assert_ne!(f.vector[0].signum(), f.vector[2].signum());
    }

    #[test]
    fn full_rank_global_score_is_identity() {
        let m = InteractionMatrix::from_dense_rows(&[
            vec![1, 1, 0],
            vec![0, 1, 1],
            vec![1, 0, 1],
            vec![1, 1, 1],
        ])
        .unwrap();
        let view = NormalizedView::new(&m).unwrap();
        let b = truncated_svd(&view, &all_items(&m), 3, &SolverOptions::default()).unwrap();
        let row = [(0u32, 1.0), (2u32, 0.5)];
        let s = b.score(&row).unwrap();
        for (got, want) in s.iter().zip([1.0, 0.0, 0.5]) {
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn empty_row_scores_zero() {
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
        let view = NormalizedView::new(&m).unwrap();
        let b = truncated_svd(&view, &all_items(&m), 1, &SolverOptions::default()).unwrap();
        assert_eq!(b.score(&[]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn score_rejects_out_of_range_row() {
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 1], vec![0, 1]]).unwrap();
        let view = NormalizedView::new(&m).unwrap();
        let b = truncated_svd(&view, &all_items(&m), 1, &SolverOptions::default()).unwrap();
        assert!(matches!(b.score(&[(5, 1.0)]), Err(Error::ShapeError(_))));
    }
}

//! Iterative eigensolvers for symmetric positive semidefinite operators.
//!
//! Two solvers share one operator abstraction: block subspace iteration with
//! Rayleigh-Ritz extraction (used for the SVD-based factors, where a block of
//! vectors is wanted anyway) and explicitly restarted Lanczos with full
//! reorthogonalization (used where a single extreme eigenpair sits in a
//! tightly clustered spectrum).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Tolerances and seeding shared by the iterative solvers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Residual tolerance relative to the operator scale.
    pub tol: f64,
    pub max_iter: usize,
    /// Extra block columns beyond the requested rank.
    pub oversample: usize,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-7,
            max_iter: 1000,
            oversample: 10,
            seed: 0,
        }
    }
}

impl SolverOptions {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(Error::InvalidArgument(format!(
                "solver needs tol > 0 and max_iter >= 1 (tol = {}, max_iter = {})",
                self.tol, self.max_iter
            )));
        }
        Ok(())
    }
}

/// Symmetric PSD linear operator acting on column blocks.
pub(crate) trait SymOperator: Sync {
    fn dim(&self) -> usize;
    /// `A X` for an `n x b` block.
    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone)]
pub(crate) struct EigenPairs {
    /// Descending.
    pub values: Vec<f64>,
    /// One column per value.
    pub vectors: DMatrix<f64>,
    pub iterations: usize,
}

fn random_block(n: usize, b: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(n, b, |_, _| StandardNormal.sample(rng))
}

fn project_out(x: &mut DMatrix<f64>, deflate: &[DVector<f64>]) {
    for t in deflate {
        for mut col in x.column_iter_mut() {
            let c = t.dot(&col);
            col.axpy(-c, t, 1.0);
        }
    }
}

/// Gram-Schmidt with one re-orthogonalization pass per column. Columns that
/// collapse are replaced by fresh random directions so the block keeps full
/// rank.
pub(crate) fn orthonormalize(x: &mut DMatrix<f64>, deflate: &[DVector<f64>], rng: &mut ChaCha8Rng) {
    let (n, b) = x.shape();
    project_out(x, deflate);
    for j in 0..b {
        let mut attempts = 0;
        loop {
            let before = x.column(j).norm();
            for _ in 0..2 {
                for t in deflate {
                    let c = t.dot(&x.column(j));
                    x.column_mut(j).axpy(-c, t, 1.0);
                }
                if j > 0 {
                    let (done, mut rest) = x.columns_range_pair_mut(0..j, j..j + 1);
                    let coeffs = done.transpose() * &rest;
                    rest.gemm(-1.0, &done, &coeffs, 1.0);
                }
            }
            let after = x.column(j).norm();
            if after > 1e-10 * before.max(1e-300) && after > 1e-300 {
                x.column_mut(j).scale_mut(1.0 / after);
                break;
            }
            attempts += 1;
            assert!(attempts < 16, "cannot extend an orthonormal block of {b} in dimension {n}");
            let fresh = random_block(n, 1, rng);
            x.set_column(j, &fresh.column(0));
        }
    }
}

/// Eigen-decomposition of a small symmetric matrix, sorted descending.
pub(crate) fn sorted_sym_eigen(h: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let sym = (h + h.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(h.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Top-`k` eigenpairs of `op` restricted to the orthogonal complement of
/// `deflate` (orthonormal vectors that must be invariant under `op`).
///
/// Converged when every returned pair satisfies
/// `‖A v − θ v‖ ≤ tol · max(θ₁, scale)`.
pub(crate) fn subspace_iteration(
    op: &dyn SymOperator,
    k: usize,
    deflate: &[DVector<f64>],
    scale: f64,
    opts: &SolverOptions,
) -> Result<EigenPairs> {
    opts.validate()?;
    let n = op.dim();
    let available = n.saturating_sub(deflate.len());
    if k == 0 || k > available {
        return Err(Error::InvalidArgument(format!(
            "cannot extract {k} eigenpairs from a {available}-dimensional space"
        )));
    }
    let block = (k + opts.oversample).min(available);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut x = random_block(n, block, &mut rng);
    orthonormalize(&mut x, deflate, &mut rng);

    let mut best = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        let mut y = op.apply(&x);
        project_out(&mut y, deflate);
        let h = x.transpose() * &y;
        let (theta, c) = sorted_sym_eigen(&h);
        let ritz = &x * &c;
        let ay = &y * &c;
        let threshold = opts.tol * theta[0].max(scale);
        let worst = (0..k)
            .map(|j| (ay.column(j) - ritz.column(j) * theta[j]).norm())
            .fold(0.0f64, f64::max);
        best = best.min(worst);
        // A block spanning the whole space is exact after one projection.
        if worst <= threshold || block == available {
            return Ok(EigenPairs {
                values: theta[..k].to_vec(),
                vectors: ritz.columns(0, k).clone_owned(),
                iterations: iter,
            });
        }
        x = ay;
        orthonormalize(&mut x, deflate, &mut rng);
    }
    Err(Error::SvdNoConverge {
        iterations: opts.max_iter,
        best_residual: best,
    })
}

/// Largest eigenpair of `op` on the complement of `deflate`, by restarted
/// Lanczos. `max_iter` bounds the total number of operator applications.
pub(crate) fn lanczos_top(
    op: &dyn SymOperator,
    deflate: &[DVector<f64>],
    scale: f64,
    krylov_dim: usize,
    opts: &SolverOptions,
) -> Result<(f64, DVector<f64>)> {
    opts.validate()?;
    let n = op.dim();
    let available = n.saturating_sub(deflate.len());
    if available == 0 {
        return Err(Error::InvalidArgument("no dimensions left after deflation".into()));
    }
    let m = krylov_dim.clamp(2, available.max(2)).min(available);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut start = random_block(n, 1, &mut rng);
    orthonormalize(&mut start, deflate, &mut rng);

    let mut applied = 0usize;
    let mut best = f64::INFINITY;
    while applied < opts.max_iter {
        let mut basis = DMatrix::<f64>::zeros(n, m);
        basis.set_column(0, &start.column(0));
        let mut alpha = Vec::with_capacity(m);
        let mut beta: Vec<f64> = Vec::with_capacity(m);
        let mut dim = m;
        let mut tail_beta = 0.0;
        for j in 0..m {
            let q = basis.columns(j, 1).clone_owned();
            let mut w = op.apply(&q);
            applied += 1;
            project_out(&mut w, deflate);
            let a = q.column(0).dot(&w.column(0));
            alpha.push(a);
            // Full reorthogonalization against the basis built so far, twice.
            for _ in 0..2 {
                let coeffs = basis.columns(0, j + 1).transpose() * w.column(0);
                w.column_mut(0).gemv(-1.0, &basis.columns(0, j + 1), &coeffs, 1.0);
                project_out(&mut w, deflate);
            }
            let b = w.column(0).norm();
            if j + 1 == m {
                tail_beta = b;
                break;
            }
            if b <= 1e-12 * a.abs().max(scale) {
                // Invariant subspace found: the Ritz values are exact.
                dim = j + 1;
                tail_beta = 0.0;
                break;
            }
            beta.push(b);
            basis.set_column(j + 1, &(w.column(0) / b));
        }
        let t = DMatrix::from_fn(dim, dim, |r, c| {
            if r == c {
                alpha[r]
            } else if r + 1 == c || c + 1 == r {
                beta[r.min(c)]
            } else {
                0.0
            }
        });
        let (theta, y) = sorted_sym_eigen(&t);
        let residual = tail_beta * y[(dim - 1, 0)].abs();
        best = best.min(residual);
        let mut vector = basis.columns(0, dim) * y.column(0);
        let norm = vector.norm();
        vector /= norm;
        if residual <= opts.tol * theta[0].max(scale) || dim < m || m == available {
            return Ok((theta[0], vector));
        }
        start = DMatrix::from_column_slice(n, 1, vector.as_slice());
    }
    Err(Error::SvdNoConverge {
        iterations: opts.max_iter,
        best_residual: best,
    })
}

/// Replace the basis of every cluster of (numerically) repeated eigenvalues
/// by the orthonormalized projections of the coordinate axes, taken in index
/// order. The eigenspace is unchanged; only the arbitrary rotation inside it
/// picked by the random start is removed.
pub(crate) fn canonicalize_clusters(values: &[f64], vectors: &mut DMatrix<f64>, rel_tol: f64) {
    let scale = values.first().map_or(0.0, |v| v.abs()).max(1e-300);
    let n = vectors.nrows();
    let mut start = 0;
    while start < values.len() {
        let mut end = start + 1;
        while end < values.len() && (values[start] - values[end]).abs() <= rel_tol * scale {
            end += 1;
        }
        let c = end - start;
        if c > 1 {
            let u = vectors.columns(start, c).clone_owned();
            let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(c);
            for i in 0..n {
                if chosen.len() == c {
                    break;
                }
                let mut w: DVector<f64> = &u * u.row(i).transpose();
                for q in &chosen {
                    let d = q.dot(&w);
                    w.axpy(-d, q, 1.0);
                }
                let norm = w.norm();
                if norm > 1e-3 {
                    chosen.push(w / norm);
                }
            }
            if chosen.len() == c {
                for (j, q) in chosen.iter().enumerate() {
                    vectors.set_column(start + j, q);
                }
            }
        }
        start = end;
    }
}

/// Flip each column so its largest-magnitude entry (first on ties) is positive.
pub(crate) fn canonicalize_signs(v: &mut DMatrix<f64>) {
    for mut col in v.column_iter_mut() {
        let mut best = 0usize;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Dense(DMatrix<f64>);

    impl SymOperator for Dense {
        fn dim(&self) -> usize {
            self.0.nrows()
        }
        fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
            &self.0 * x
        }
    }

    fn diag_op(values: &[f64]) -> Dense {
        Dense(DMatrix::from_diagonal(&DVector::from_column_slice(values)))
    }

    #[test]
    fn subspace_iteration_finds_top_of_diagonal() {
        let values: Vec<f64> = (0..60).map(|i| 1.0 / (1.0 + i as f64)).collect();
        let op = diag_op(&values);
        let opts = SolverOptions {
            tol: 1e-10,
            oversample: 6,
            ..Default::default()
        };
        let res = subspace_iteration(&op, 3, &[], 1.0, &opts).unwrap();
        for (got, want) in res.values.iter().zip(&values[..3]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(res.iterations > 1);
    }

    #[test]
    fn subspace_iteration_honors_deflation() {
        let op = diag_op(&[1.0, 0.5, 0.25, 0.1]);
        let e0 = DVector::from_column_slice(&[1.0, 0.0, 0.0, 0.0]);
        let res = subspace_iteration(&op, 1, &[e0], 1.0, &SolverOptions::default()).unwrap();
        assert!((res.values[0] - 0.5).abs() < 1e-12);
        assert!(res.vectors[(0, 0)].abs() < 1e-12);
    }

    #[test]
    fn subspace_iteration_reports_non_convergence() {
        let values: Vec<f64> = (0..200).map(|i| 1.0 - 1e-6 * i as f64).collect();
        let op = diag_op(&values);
        let opts = SolverOptions {
            tol: 1e-14,
            max_iter: 3,
            oversample: 1,
            seed: 1,
        };
        match subspace_iteration(&op, 2, &[], 1.0, &opts) {
            Err(Error::SvdNoConverge { iterations, best_residual }) => {
                assert_eq!(iterations, 3);
                assert!(best_residual.is_finite());
            }
            other => panic!("expected SvdNoConverge, got {other:?}"),
        }
    }

    #[test]
    fn lanczos_finds_clustered_top() {
        let values: Vec<f64> = (0..300).map(|i| 2.0 - 0.001 * i as f64).collect();
        let op = diag_op(&values);
        let e0 = DVector::from_fn(300, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let opts = SolverOptions {
            tol: 1e-10,
            max_iter: 20_000,
            ..Default::default()
        };
        let (theta, v) = lanczos_top(&op, &[e0], 2.0, 80, &opts).unwrap();
        assert!((theta - 1.999).abs() < 1e-9, "{theta}");
        assert!(v[1].abs() > 1.0 - 1e-6);
    }

    #[test]
    fn orthonormalize_repairs_rank_deficiency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut x = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        orthonormalize(&mut x, &[], &mut rng);
        let g = x.transpose() * &x;
        assert!((g - DMatrix::identity(2, 2)).abs().max() < 1e-12);
    }
}

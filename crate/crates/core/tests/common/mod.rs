//! Dense reference computations shared by the integration tests.
#![allow(dead_code)]

use fpsr::sparse::InteractionMatrix;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random binary matrix where every user and every item has an interaction.
pub fn random_matrix(seed: u64, n_users: usize, n_items: usize, density: f64) -> InteractionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        for i in 0..n_items {
            if rng.random::<f64>() < density {
                pairs.push((u as u32, i as u32));
            }
        }
    }
    for u in 0..n_users {
        pairs.push((u as u32, rng.random_range(0..n_items) as u32));
    }
    for i in 0..n_items {
        pairs.push((rng.random_range(0..n_users) as u32, i as u32));
    }
    pairs.sort_unstable();
    pairs.dedup();
    InteractionMatrix::from_pairs(n_users, n_items, &pairs).unwrap()
}

/// Users split into `groups` communities with mostly in-group items.
pub fn clustered_matrix(seed: u64, n_users: usize, n_items: usize, groups: usize, p_in: f64, p_out: f64) -> InteractionMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::new();
    for u in 0..n_users {
        let gu = u * groups / n_users;
        for i in 0..n_items {
            let gi = i * groups / n_items;
            let p = if gu == gi { p_in } else { p_out };
            if rng.random::<f64>() < p {
                pairs.push((u as u32, i as u32));
            }
        }
    }
    for i in 0..n_items {
        let g = i * groups / n_items;
        let lo = g * n_users / groups;
        let hi = ((g + 1) * n_users / groups).max(lo + 1);
        pairs.push((rng.random_range(lo..hi) as u32, i as u32));
    }
    for u in 0..n_users {
        let g = u * groups / n_users;
        let lo = g * n_items / groups;
        let hi = ((g + 1) * n_items / groups).max(lo + 1);
        pairs.push((u as u32, rng.random_range(lo..hi) as u32));
    }
    pairs.sort_unstable();
    pairs.dedup();
    InteractionMatrix::from_pairs(n_users, n_items, &pairs).unwrap()
}

/// `D_U^{-1/2} R D_I^{-1/2}` built from the dense 0/1 matrix.
pub fn dense_normalized(m: &InteractionMatrix) -> DMatrix<f64> {
    let r = m.to_dense();
    let du: Vec<f64> = r.row_iter().map(|row| row.sum()).collect();
    let di: Vec<f64> = r.column_iter().map(|col| col.sum()).collect();
    DMatrix::from_fn(r.nrows(), r.ncols(), |u, i| {
        if r[(u, i)] == 0.0 {
            0.0
        } else {
            r[(u, i)] / (du[u] * di[i]).sqrt()
        }
    })
}

pub fn item_degrees(m: &InteractionMatrix) -> Vec<f64> {
    m.to_dense().column_iter().map(|c| c.sum()).collect()
}

/// Eigenvalues ascending with matching eigenvector columns.
pub fn sym_eigen_ascending(a: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let e = SymmetricEigen::new(a);
    let mut idx: Vec<usize> = (0..e.eigenvalues.len()).collect();
    idx.sort_by(|&x, &y| e.eigenvalues[x].total_cmp(&e.eigenvalues[y]));
    let values = idx.iter().map(|&i| e.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(e.eigenvectors.nrows(), idx.len(), |r, c| e.eigenvectors[(r, idx[c])]);
    (values, vectors)
}

/// Top-k singular values of `R̃` and the corresponding right singular vectors.
pub fn dense_svd(m: &InteractionMatrix, k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let rt = dense_normalized(m);
    let (vals, vecs) = sym_eigen_ascending(rt.transpose() * &rt);
    let n = vals.len();
    let sigma = (0..k).map(|j| vals[n - 1 - j].max(0.0).sqrt()).collect();
    let v = DMatrix::from_fn(n, k, |r, c| vecs[(r, n - 1 - c)]);
    (sigma, v)
}

/// `D^{-1/2} V Vᵀ D^{1/2}` with `V` from the dense decomposition.
pub fn dense_w(m: &InteractionMatrix, k: usize) -> DMatrix<f64> {
    let (_, v) = dense_svd(m, k);
    let d = item_degrees(m);
    let vvt = &v * v.transpose();
    DMatrix::from_fn(d.len(), d.len(), |i, j| vvt[(i, j)] * d[j].sqrt() / d[i].sqrt())
}

/// `½ tr(SᵀQ̂S) − ⟨Q̂(I − λW), S⟩ + θ₁ Σ S`.
pub fn objective(qhat: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64, theta1: f64, s: &DMatrix<f64>) -> f64 {
    let n = qhat.nrows();
    let target = qhat * (DMatrix::identity(n, n) - w * lambda);
    0.5 * (s.transpose() * qhat * s).trace() - target.dot(s) + theta1 * s.sum()
}

/// Accelerated projected gradient on `{S ≥ 0, diag(S) = 0}`.
pub fn projected_gradient(qhat: &DMatrix<f64>, w: &DMatrix<f64>, lambda: f64, theta1: f64, iters: usize) -> DMatrix<f64> {
    let n = qhat.nrows();
    let target = qhat * (DMatrix::identity(n, n) - w * lambda);
    let lmax = SymmetricEigen::new(qhat.clone()).eigenvalues.max();
    let step = 1.0 / lmax;
    let project = |mut x: DMatrix<f64>| {
        x.apply(|v| *v = v.max(0.0));
        x.fill_diagonal(0.0);
        x
    };
    let mut s = DMatrix::zeros(n, n);
    let mut y = s.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let grad = qhat * &y - &target;
        let next = project(&y - (grad.add_scalar(theta1)) * step);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        y = &next + (&next - &s) * ((t - 1.0) / t_next);
        s = next;
        t = t_next;
    }
    s
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).abs().max()
}

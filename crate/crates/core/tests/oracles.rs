mod common;

use common::*;
use fpsr::admm::{build_qhat, AdmmConfig, AdmmSolver};
use fpsr::model::binary_row;
use fpsr::partition::{bisect, partition};
use fpsr::pipeline::{train, TrainConfig};
use fpsr::sparse::{gram, InteractionMatrix, MemoryBudget, NormalizedView};
use fpsr::spectral::{fiedler, truncated_svd};
use fpsr::SolverOptions;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn tight() -> SolverOptions {
    SolverOptions {
        tol: 1e-12,
        max_iter: 20_000,
        ..Default::default()
    }
}

fn all_items(m: &InteractionMatrix) -> Vec<u32> {
    (0..m.n_items() as u32).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn gram_matches_brute_force(seed in 0u64..1000, nu in 2usize..30, ni in 2usize..25) {
        let m = random_matrix(seed, nu, ni, 0.2);
        let items: Vec<u32> = (0..ni as u32).filter(|i| i % 3 != 1).collect();
        let g = gram(&m, &items, MemoryBudget::UNLIMITED).unwrap();
        let r = m.to_dense();
        for (a, &i) in items.iter().enumerate() {
            for (b, &j) in items.iter().enumerate() {
                let count = (0..nu).filter(|&u| r[(u, i as usize)] == 1.0 && r[(u, j as usize)] == 1.0).count();
                prop_assert_eq!(g[(a, b)], count as f64);
            }
        }
    }

    #[test]
    fn ingest_is_order_independent(seed in 0u64..1000) {
        let m = random_matrix(seed, 12, 9, 0.3);
        let mut recs: Vec<(String, String)> = (0..m.n_users())
            .flat_map(|u| m.row(u).iter().map(move |&i| (format!("u{u}"), format!("i{i}"))))
            .collect();
        let a = InteractionMatrix::ingest(recs.clone()).unwrap();
        recs.reverse();
        let b = InteractionMatrix::ingest(recs).unwrap();
        // Same interactions regardless of record order, under the id maps.
        let set = |x: &InteractionMatrix| {
            let mut s: Vec<(String, String)> = (0..x.n_users())
                .flat_map(|u| x.row(u).iter().map(move |&i| (x.user_ids().external(u as u32).to_owned(), x.item_ids().external(i).to_owned())))
                .collect();
            s.sort();
            s
        };
        prop_assert_eq!(set(&a), set(&b));
        prop_assert_eq!(a.nnz(), b.nnz());
    }

    #[test]
    fn svd_matches_dense(seed in 0u64..1000, nu in 5usize..50, ni in 4usize..40, k in 1usize..8) {
        let m = random_matrix(seed, nu, ni, 0.15);
        let k = k.min(nu).min(ni);
        let view = NormalizedView::new(&m).unwrap();
        let basis = truncated_svd(&view, &all_items(&m), k, &tight()).unwrap();
        let (sigma, _) = dense_svd(&m, k);
        for (a, b) in basis.sigma().iter().zip(&sigma) {
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }
        // V is orthonormal and spans eigenvectors of Q̃.
        let v = basis.v();
        prop_assert!((v.transpose() * v - DMatrix::identity(k, k)).abs().max() < 1e-8);
        let rt = dense_normalized(&m);
        let q = rt.transpose() * &rt;
        for c in 0..k {
            let x = v.column(c).into_owned();
            let lam = basis.sigma()[c].powi(2);
            prop_assert!((&q * &x - x * lam).norm() < 1e-6);
        }
    }

    #[test]
    fn nested_ranks_agree(seed in 0u64..1000) {
        let m = random_matrix(seed, 30, 20, 0.2);
        let view = NormalizedView::new(&m).unwrap();
        let a = truncated_svd(&view, &all_items(&m), 3, &tight()).unwrap();
        let b = truncated_svd(&view, &all_items(&m), 6, &tight()).unwrap();
        for j in 0..3 {
            prop_assert!((a.sigma()[j] - b.sigma()[j]).abs() < 1e-8);
        }
    }

    #[test]
    fn score_is_linear_in_the_row(seed in 0u64..1000, a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let m = random_matrix(seed, 20, 15, 0.2);
        let view = NormalizedView::new(&m).unwrap();
        let basis = truncated_svd(&view, &all_items(&m), 4, &SolverOptions::default()).unwrap();
        let x = vec![(0u32, 1.0), (3, 1.0)];
        let y = vec![(3u32, 1.0), (7, 1.0), (9, 1.0)];
        let mut xy: Vec<(u32, f64)> = x.iter().map(|&(i, v)| (i, a * v)).collect();
        xy.extend(y.iter().map(|&(i, v)| (i, b * v)));
        let sx = basis.score(&x).unwrap();
        let sy = basis.score(&y).unwrap();
        let sxy = basis.score(&xy).unwrap();
        for j in 0..15 {
            prop_assert!((sxy[j] - (a * sx[j] + b * sy[j])).abs() < 1e-10);
        }
    }
}

#[test]
fn fiedler_matches_dense_laplacian() {
    let mut compared_vectors = 0;
    for seed in 0..20u64 {
        let m = random_matrix(seed, 10 + (seed as usize * 7) % 40, 6 + (seed as usize * 5) % 34, 0.15);
        let view = NormalizedView::new(&m).unwrap();
        let got = fiedler(&view, &all_items(&m), &tight()).unwrap();
        let rt = dense_normalized(&m);
        let n = m.n_items();
        let lap = DMatrix::identity(n, n) - rt.transpose() * &rt;
        let (vals, vecs) = sym_eigen_ascending(lap);
        assert!((got.value - vals[1]).abs() < 1e-8, "seed {seed}: {} vs {}", got.value, vals[1]);
        // The vector is determined up to sign only when λ₂ is simple.
        if vals[2] - vals[1] > 1e-3 && vals[1] - vals[0] > 1e-3 {
            let want = vecs.column(1);
            let got = DVector::from_vec(got.vector);
            let err = (&got - want).abs().max().min((&got + want).abs().max());
            assert!(err < 1e-8, "seed {seed}: vector error {err}");
            compared_vectors += 1;
        }
    }
    assert!(compared_vectors >= 10, "only {compared_vectors} instances had a simple λ₂");
}

#[test]
fn fiedler_on_a_path_like_graph() {
    // Items 0-1-2-3 chained through shared users.
    let m = InteractionMatrix::from_dense_rows(&[vec![1, 1, 0, 0], vec![0, 1, 1, 0], vec![0, 0, 1, 1]]).unwrap();
    let view = NormalizedView::new(&m).unwrap();
    let f = fiedler(&view, &all_items(&m), &tight()).unwrap();
    let rt = dense_normalized(&m);
    let (vals, vecs) = sym_eigen_ascending(DMatrix::identity(4, 4) - rt.transpose() * &rt);
    assert!((f.value - vals[1]).abs() < 1e-10);
    let s = f.vector[0].signum() * vecs[(0, 1)].signum();
    for i in 0..4 {
        assert!((f.vector[i] - s * vecs[(i, 1)]).abs() < 1e-8);
    }
    // Ends of the path land on opposite sides.
    let (left, right) = bisect(&view, &all_items(&m), &tight()).unwrap();
    assert!(left.contains(&0) != left.contains(&3));
    assert_eq!(left.len() + right.len(), 4);
}

#[test]
fn bisect_matches_dense_sign_split() {
    let m = clustered_matrix(7, 120, 100, 2, 0.12, 0.02);
    let view = NormalizedView::new(&m).unwrap();
    let (left, right) = bisect(&view, &all_items(&m), &tight()).unwrap();
    let rt = dense_normalized(&m);
    let (vals, vecs) = sym_eigen_ascending(DMatrix::identity(100, 100) - rt.transpose() * &rt);
    assert!(vals[2] - vals[1] > 1e-3);
    let mut v: Vec<f64> = vecs.column(1).iter().copied().collect();
    // Same sign convention: largest-magnitude entry positive.
    let big = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if big < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let want_left: Vec<u32> = (0..100).filter(|&i| v[i as usize] >= 0.0).collect();
    let want_right: Vec<u32> = (0..100).filter(|&i| v[i as usize] < 0.0).collect();
    assert_eq!(left, want_left);
    assert_eq!(right, want_right);
}

#[test]
fn partition_properties() {
    let m = clustered_matrix(3, 300, 200, 6, 0.1, 0.005);
    let view = NormalizedView::new(&m).unwrap();
    let opts = SolverOptions::default().with_seed(5);
    let a = partition(&view, 0.3, &opts).unwrap();
    let b = partition(&view, 0.3, &opts).unwrap();
    assert_eq!(a, b, "same seed must give the same partitioning");
    for (p, items) in a.partitions().iter().enumerate() {
        assert!(items.len() < 60 || a.is_unsplittable(p), "partition of {} items", items.len());
    }
    // Smaller tau never gives fewer partitions on this instance.
    let mut last = 0;
    for tau in [0.9, 0.6, 0.3, 0.15, 0.05] {
        let n = partition(&view, tau, &opts).unwrap().n_partitions();
        assert!(n >= last, "tau {tau}: {n} < {last}");
        last = n;
    }
}

fn admm_cfg(qhat: &DMatrix<f64>) -> AdmmConfig {
    AdmmConfig {
        theta1: 0.3,
        lambda: 0.4,
        rho: qhat.trace() / qhat.nrows() as f64,
        max_iter: 20_000,
        tol: 1e-11,
        ..Default::default()
    }
}

#[test]
fn admm_beats_projected_gradient() {
    for seed in 0..20u64 {
        let m = random_matrix(100 + seed, 15 + (seed as usize * 3) % 35, 5 + (seed as usize) % 16, 0.25);
        let k = 3.min(m.n_items() - 1);
        let w = dense_w(&m, k);
        let items = all_items(&m);
        let qhat = build_qhat(&m, &items, &AdmmConfig::default(), MemoryBudget::UNLIMITED).unwrap();
        let cfg = admm_cfg(&qhat);
        let out = AdmmSolver::new(&qhat, &w, &cfg).unwrap().run(false).unwrap();
        let s = &out.state.s;
        for i in 0..s.nrows() {
            assert_eq!(s[(i, i)], 0.0);
        }
        assert!(s.iter().all(|&x| x >= 0.0));
        let oracle = projected_gradient(&qhat, &w, cfg.lambda, cfg.theta1, 20_000);
        let f_admm = objective(&qhat, &w, cfg.lambda, cfg.theta1, s);
        let f_pg = objective(&qhat, &w, cfg.lambda, cfg.theta1, &oracle);
        assert!(f_admm <= f_pg + 1e-4, "seed {seed}: admm {f_admm} vs pg {f_pg}");
    }
}

#[test]
fn eta_equals_an_appended_row() {
    // η·J is the Gram contribution of an extra row of sqrt(η); θ₂D keeps the
    // original degrees.
    let m = random_matrix(42, 25, 12, 0.25);
    let items = all_items(&m);
    let eta = 0.7;
    let base = AdmmConfig {
        eta,
        theta2: 0.8,
        ..Default::default()
    };
    let qhat = build_qhat(&m, &items, &base, MemoryBudget::UNLIMITED).unwrap();
    let r = m.to_dense();
    let aug = DMatrix::from_fn(r.nrows() + 1, r.ncols(), |u, i| if u < r.nrows() { r[(u, i)] } else { eta.sqrt() });
    let mut manual = aug.transpose() * &aug;
    for (i, d) in item_degrees(&m).iter().enumerate() {
        manual[(i, i)] += base.theta2 * d;
    }
    assert!(max_abs_diff(&qhat, &manual) < 1e-12);
    let w = dense_w(&m, 3);
    let cfg = AdmmConfig { max_iter: 300, ..base };
    let a = AdmmSolver::new(&qhat, &w, &cfg).unwrap().run(false).unwrap();
    let b = AdmmSolver::new(&manual, &w, &cfg).unwrap().run(false).unwrap();
    assert!(max_abs_diff(&a.state.s, &b.state.s) < 1e-8);
}

fn small_train_cfg(tau: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        k: 4,
        tau,
        seed,
        admm: AdmmConfig {
            theta1: 0.2,
            lambda: 0.3,
            rho: 50.0,
            max_iter: 300,
            prune_threshold: 1e-4,
            ..Default::default()
        },
        ..Default::default()
    }
}

/// `λ D^{-1/2} V Vᵀ D^{1/2} + S` from the model's stored factors.
fn dense_c(model: &fpsr::model::SimilarityModel, m: &InteractionMatrix) -> DMatrix<f64> {
    let v = model.basis().v();
    let d = item_degrees(m);
    let vvt = v * v.transpose();
    let w = DMatrix::from_fn(d.len(), d.len(), |i, j| vvt[(i, j)] * d[j].sqrt() / d[i].sqrt());
    w * model.lambda() + model.s().to_dense()
}

#[test]
fn scores_and_lists_match_dense_c() {
    for seed in 0..20u64 {
        let m = random_matrix(500 + seed, 30 + seed as usize, 20 + (seed as usize) % 20, 0.15);
        let model = train(&m, &small_train_cfg(0.5, seed)).unwrap().model;
        let c = dense_c(&model, &m);
        let r = m.to_dense();
        let dense_scores = &r * &c;
        for u in 0..m.n_users() {
            let row = binary_row(m.row(u));
            let got = model.score(&row).unwrap();
            for j in 0..m.n_items() {
                assert!((got[j] - dense_scores[(u, j)]).abs() < 1e-8, "seed {seed} user {u} item {j}");
            }
            let mut want: Vec<(u32, f64)> = (0..m.n_items() as u32)
                .filter(|i| !m.row(u).contains(i))
                .map(|i| (i, got[i as usize]))
                .collect();
            want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            want.truncate(5);
            assert_eq!(model.recommend(&row, 5, true).unwrap(), want);
        }
        let batch = model.score_batch(&[&binary_row(m.row(0)), &binary_row(m.row(1))]).unwrap();
        for j in 0..m.n_items() {
            assert!((batch[(1, j)] - dense_scores[(1, j)]).abs() < 1e-8);
        }
    }
}

#[test]
fn rescaling_keeps_rankings() {
    let m = random_matrix(9, 40, 25, 0.15);
    let model = train(&m, &small_train_cfg(0.5, 1)).unwrap().model;
    let scaled = model.rescaled(3.5);
    for u in 0..m.n_users() {
        let row = binary_row(m.row(u));
        let a: Vec<u32> = model.recommend(&row, 10, true).unwrap().into_iter().map(|e| e.0).collect();
        let b: Vec<u32> = scaled.recommend(&row, 10, true).unwrap().into_iter().map(|e| e.0).collect();
        assert_eq!(a, b);
    }
}

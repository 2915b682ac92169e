//! Per-partition fine-tuning of the sparse non-negative similarity block.
//!
//! Each partition solves
//!
//! ```text
//! min_S  ½ tr(SᵀQ̂S) − ⟨Q̂(I − λW_n), S⟩ + θ₁‖S‖₁   s.t. diag(S) = 0, S ≥ 0
//! ```
//!
//! with `Q̂ = R_nᵀR_n + θ₂·D_I + η·J`, split as `Z = S` and solved by ADMM.
//! The `Z`-step is a linear solve with the fixed matrix `Q̂ + ρI`, whose
//! inverse is formed once from its Cholesky factor; the zero-diagonal
//! constraint is enforced exactly through the multiplier vector `μ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{gram, InteractionMatrix, MemoryBudget};

/// Residual growth over its running minimum that counts as divergence, once
/// the residual is also above `DIVERGENCE_FLOOR`.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_FLOOR: f64 = 1.0;

/// Dense `p x p` buffers alive during one solve (Q̂, W_n, inverse, base, Z, S, Φ, scratch).
pub const DENSE_BUFFERS_PER_SOLVE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    /// ℓ1 weight.
    pub theta1: f64,
    /// Degree-weighted ℓ2 weight.
    pub theta2: f64,
    /// Weight of the partition-wide augmentation row.
    pub eta: f64,
    /// Mix weight of the global similarity `W`.
    pub lambda: f64,
    /// ADMM penalty.
    pub rho: f64,
    pub max_iter: usize,
    /// Entries of the solved block below this are dropped.
    pub prune_threshold: f64,
    /// Stop once both `‖Z − S‖_max` and `‖S − S_prev‖_max` fall below this.
    pub tol: f64,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            theta1: 0.5,
            theta2: 1.0,
            eta: 0.1,
            lambda: 0.3,
            rho: 5000.0,
            max_iter: 50,
            prune_threshold: 2e-3,
            tol: 1e-4,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} (config: {self:?})")));
        if !(self.theta1 > 0.0) {
            return bad("theta1 must be > 0");
        }
        // Zero is allowed for the ablation variants.
        if !(self.theta2 >= 0.0) || !(self.eta >= 0.0) {
            return bad("theta2 and eta must be >= 0");
        }
        if !(self.rho > 0.0) {
            return bad("rho must be > 0");
        }
        if !(0.0..1.0).contains(&self.lambda) {
            return bad("lambda must be in [0, 1)");
        }
        if self.max_iter == 0 {
            return bad("max_iter must be >= 1");
        }
        if !(self.prune_threshold >= 0.0) || !(self.tol >= 0.0) {
            return bad("prune_threshold and tol must be >= 0");
        }
        Ok(())
    }
}

/// `gram + θ₂·diag(degrees) + η·J`.
pub fn qhat_from_gram(mut gram: DMatrix<f64>, degrees: &[f64], theta2: f64, eta: f64) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    if gram.ncols() != p || degrees.len() != p {
        return Err(Error::ShapeError(format!(
            "gram {}x{} with {} degrees",
            gram.nrows(),
            gram.ncols(),
            degrees.len()
        )));
    }
    if eta != 0.0 {
        gram.add_scalar_mut(eta);
    }
    for (a, d) in degrees.iter().enumerate() {
        gram[(a, a)] += theta2 * d;
    }
    Ok(gram)
}

/// `Q̂ = R_nᵀR_n + θ₂·D_I + η·J` for the items of one partition.
pub fn build_qhat(m: &InteractionMatrix, items: &[u32], cfg: &AdmmConfig, budget: MemoryBudget) -> Result<DMatrix<f64>> {
    let g = gram(m, items, budget)?;
    let degrees: Vec<f64> = items.iter().map(|&i| m.item_degrees()[i as usize]).collect();
    qhat_from_gram(g, &degrees, cfg.theta2, cfg.eta)
}

/// Iterates of one partition solve.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub z: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub iter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// `‖Z − S‖_max`.
    pub primal_residual: f64,
    /// `‖S − S_prev‖_max`.
    pub dual_residual: f64,
    pub objective: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub state: AdmmState,
    pub log: Vec<IterationRecord>,
    pub converged: bool,
}

/// Value of the partition objective at a feasible `s`.
pub fn objective(qhat: &DMatrix<f64>, w_n: &DMatrix<f64>, cfg: &AdmmConfig, s: &DMatrix<f64>) -> f64 {
    let p = qhat.nrows();
    let qs = qhat * s;
    let quad = 0.5 * s.dot(&qs);
    let target = qhat * (DMatrix::identity(p, p) - w_n * cfg.lambda);
    quad - target.dot(s) + cfg.theta1 * s.iter().map(|x| x.abs()).sum::<f64>()
}

/// ADMM iteration for one partition, with the `Z`-step operators precomputed.
pub struct AdmmSolver<'a> {
    qhat: &'a DMatrix<f64>,
    w_n: &'a DMatrix<f64>,
    cfg: AdmmConfig,
    /// `(Q̂ + ρI)⁻¹`.
    inverse: DMatrix<f64>,
    /// `(Q̂ + ρI)⁻¹ Q̂ (I − λW_n)`.
    base: DMatrix<f64>,
}

impl<'a> AdmmSolver<'a> {
    pub fn new(qhat: &'a DMatrix<f64>, w_n: &'a DMatrix<f64>, cfg: &AdmmConfig) -> Result<Self> {
        cfg.validate()?;
        let p = qhat.nrows();
        if qhat.ncols() != p || w_n.shape() != (p, p) {
            return Err(Error::ShapeError(format!(
                "Q̂ is {}x{}, W_n is {}x{}",
                qhat.nrows(),
                qhat.ncols(),
                w_n.nrows(),
                w_n.ncols()
            )));
        }
        let mut shifted = qhat.clone();
        for a in 0..p {
            shifted[(a, a)] += cfg.rho;
        }
        let chol = shifted
            .cholesky()
            .ok_or_else(|| Error::InvalidArgument("Q̂ + ρI is not positive definite".into()))?;
        let inverse = chol.inverse();
        let mut target = -(w_n * cfg.lambda);
        for a in 0..p {
            target[(a, a)] += 1.0;
        }
        let base = &inverse * (qhat * target);
        Ok(Self {
            qhat,
            w_n,
            cfg: *cfg,
            inverse,
            base,
        })
    }

    pub fn size(&self) -> usize {
        self.qhat.nrows()
    }

    pub fn initial_state(&self) -> AdmmState {
        let p = self.size();
        AdmmState {
            z: DMatrix::zeros(p, p),
            s: DMatrix::zeros(p, p),
            phi: DMatrix::zeros(p, p),
            iter: 0,
        }
    }

    /// One `Z`, `S`, `Φ` update. Returns `(primal, dual)` residuals.
    pub fn step(&self, state: &mut AdmmState) -> (f64, f64) {
        let p = self.size();
        let rho = self.cfg.rho;
        // B = base + ρ (Q̂ + ρI)⁻¹ (S − Φ)
        let diff = &state.s - &state.phi;
        let mut z = self.base.clone();
        z.gemm(rho, &self.inverse, &diff, 1.0);
        // μ_j = B_jj / inv_jj; Z = B − inv · diag(μ)
        for j in 0..p {
            let mu = z[(j, j)] / self.inverse[(j, j)];
            let mut col = z.column_mut(j);
            col.axpy(-mu, &self.inverse.column(j), 1.0);
        }
        let shrink = self.cfg.theta1 / rho;
        let mut primal = 0.0f64;
        let mut dual = 0.0f64;
        for j in 0..p {
            for i in 0..p {
                let zij = z[(i, j)];
                let phi = state.phi[(i, j)];
                let s_new = if i == j { 0.0 } else { (zij + phi - shrink).max(0.0) };
                dual = dual.max((s_new - state.s[(i, j)]).abs());
                primal = primal.max((zij - s_new).abs());
                state.phi[(i, j)] = phi + zij - s_new;
                state.s[(i, j)] = s_new;
            }
        }
        state.z = z;
        state.iter += 1;
        (primal, dual)
    }

    /// Iterate until converged or `max_iter`, optionally tracking the objective.
    pub fn run(&self, track_objective: bool) -> Result<AdmmOutcome> {
        let mut state = self.initial_state();
        let mut log = Vec::new();
        let mut min_primal = f64::INFINITY;
        let mut converged = false;
        while state.iter < self.cfg.max_iter {
            let (primal, dual) = self.step(&mut state);
            let objective = track_objective.then(|| objective(self.qhat, self.w_n, &self.cfg, &state.s));
            log.push(IterationRecord {
                iter: state.iter,
                primal_residual: primal,
                dual_residual: dual,
                objective,
            });
            min_primal = min_primal.min(primal);
            if !primal.is_finite() || (primal > DIVERGENCE_FACTOR * min_primal && primal > DIVERGENCE_FLOOR) {
                return Err(Error::AdmmDiverged {
                    iteration: state.iter,
                    residual: primal,
                    min_residual: min_primal,
                    log: log.iter().map(|r| r.primal_residual).collect(),
                });
            }
            if primal <= self.cfg.tol && dual <= self.cfg.tol {
                converged = true;
                break;
            }
        }
        Ok(AdmmOutcome { state, log, converged })
    }
}

/// Row-compressed sparse block with partition-local indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseBlock {
    pub size: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseBlock {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, a: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[a]..self.indptr[a + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.size, self.size);
        for a in 0..self.size {
            let (cols, vals) = self.row(a);
            for (&b, &v) in cols.iter().zip(vals) {
                d[(a, b as usize)] = v;
            }
        }
        d
    }
}

/// Keep entries `>= threshold` (and strictly positive).
pub fn prune(s: &DMatrix<f64>, threshold: f64) -> SparseBlock {
    let p = s.nrows();
    let mut block = SparseBlock {
        size: p,
        indptr: Vec::with_capacity(p + 1),
        ..Default::default()
    };
    block.indptr.push(0);
    for a in 0..p {
        for b in 0..p {
            let v = s[(a, b)];
            if v > 0.0 && v >= threshold {
                block.indices.push(b as u32);
                block.values.push(v);
            }
        }
        block.indptr.push(block.indices.len());
    }
    block
}

/// Solve one partition and drop small entries.
pub fn solve_partition(qhat: &DMatrix<f64>, w_n: &DMatrix<f64>, cfg: &AdmmConfig) -> Result<SparseBlock> {
    let outcome = AdmmSolver::new(qhat, w_n, cfg)?.run(false)?;
    if !outcome.converged {
        log::debug!(
            "partition of {} items stopped at max_iter {} (primal {:e})",
            qhat.nrows(),
            cfg.max_iter,
            outcome.log.last().map_or(f64::NAN, |r| r.primal_residual)
        );
    }
    Ok(prune(&outcome.state.s, cfg.prune_threshold))
}

/// Convergence log as CSV rows: partition, iteration, primal and dual residual, objective.
pub fn log_csv(partition: usize, log: &[IterationRecord]) -> String {
    log.iter()
        .map(|r| {
            format!(
                "{partition},{},{:e},{:e},{}\n",
                r.iter,
                r.primal_residual,
                r.dual_residual,
                r.objective.map(|o| format!("{o:e}")).unwrap_or_default()
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> InteractionMatrix {
        InteractionMatrix::from_dense_rows(&[
            vec![1, 1, 0, 1, 0],
            vec![0, 1, 1, 0, 0],
            vec![1, 0, 1, 1, 1],
            vec![1, 1, 1, 0, 0],
            vec![0, 0, 1, 1, 1],
            vec![1, 0, 0, 0, 1],
        ])
        .unwrap()
    }

    #[test]
    fn qhat_single_item() {
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 0], vec![1, 1], vec![1, 0]]).unwrap();
        let cfg = AdmmConfig {
            theta2: 0.5,
            eta: 0.25,
            ..Default::default()
        };
        let q = build_qhat(&m, &[0], &cfg, MemoryBudget::UNLIMITED).unwrap();
        assert_eq!(q[(0, 0)], 3.0 + 0.5 * 3.0 + 0.25);
    }

    #[test]
    fn qhat_two_items() {
        // gram [[2,1],[1,1]], degrees [2,1], θ₂ = 1, η = 0.1
        let m = InteractionMatrix::from_dense_rows(&[vec![1, 1], vec![1, 0]]).unwrap();
        let cfg = AdmmConfig {
            theta2: 1.0,
            eta: 0.1,
            ..Default::default()
        };
        let q = build_qhat(&m, &[0, 1], &cfg, MemoryBudget::UNLIMITED).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[4.1, 1.1, 1.1, 2.1]);
        assert!((q - want).abs().max() < 1e-12);
    }

    #[test]
    fn qhat_without_eta_is_gram_plus_degrees() {
        let m = toy();
        let items = [0, 2, 4];
        let cfg = AdmmConfig {
            theta2: 0.7,
            eta: 0.0,
            ..Default::default()
        };
        let q = build_qhat(&m, &items, &cfg, MemoryBudget::UNLIMITED).unwrap();
        let mut want = gram(&m, &items, MemoryBudget::UNLIMITED).unwrap();
        for (a, &i) in items.iter().enumerate() {
            want[(a, a)] += 0.7 * m.item_degrees()[i as usize];
        }
        assert_eq!(q, want);
    }

    fn toy_problem() -> (DMatrix<f64>, DMatrix<f64>) {
        let m = toy();
        let items: Vec<u32> = (0..5).collect();
        let cfg = AdmmConfig::default();
        let q = build_qhat(&m, &items, &cfg, MemoryBudget::UNLIMITED).unwrap();
        let w = DMatrix::from_fn(5, 5, |i, j| 0.1 * ((i + 2 * j) % 3) as f64);
        (q, w)
    }

    #[test]
    fn huge_l1_annihilates() {
        let (q, w) = toy_problem();
        let cfg = AdmmConfig {
            theta1: 1e6,
            rho: 10.0,
            max_iter: 200,
            ..Default::default()
        };
        let block = solve_partition(&q, &w, &cfg).unwrap();
        assert_eq!(block.nnz(), 0);
    }

    #[test]
    fn invariants_hold_every_iteration() {
        let (q, w) = toy_problem();
        let cfg = AdmmConfig {
            rho: 5.0,
            ..Default::default()
        };
        let solver = AdmmSolver::new(&q, &w, &cfg).unwrap();
        let mut state = solver.initial_state();
        for _ in 0..100 {
            solver.step(&mut state);
            for a in 0..5 {
                assert!(state.z[(a, a)].abs() <= 1e-8);
                assert_eq!(state.s[(a, a)], 0.0);
            }
            assert!(state.s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn large_rho_z_tracks_s_minus_phi() {
        let (q, w) = toy_problem();
        let cfg = AdmmConfig {
            rho: 1e8,
            ..Default::default()
        };
        let solver = AdmmSolver::new(&q, &w, &cfg).unwrap();
        let mut state = solver.initial_state();
        state.s = DMatrix::from_fn(5, 5, |i, j| if i == j { 0.0 } else { 0.05 * (i + j) as f64 });
        state.phi = DMatrix::from_fn(5, 5, |i, j| 0.01 * (i as f64 - j as f64));
        let expected = &state.s - &state.phi;
        solver.step(&mut state);
        for i in 0..5 {
            for j in 0..5 {
                if i != j {
                    assert!((state.z[(i, j)] - expected[(i, j)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prune_drops_small_entries() {
        let s = DMatrix::from_row_slice(2, 2, &[0.0, 0.001, 0.5, 0.0]);
        let b = prune(&s, 2e-3);
        assert_eq!(b.nnz(), 1);
        assert_eq!(b.row(1), (&[0u32][..], &[0.5][..]));
    }

    #[test]
    fn config_validation() {
        assert!(AdmmConfig::default().validate().is_ok());
        let bad = [
            AdmmConfig { theta1: 0.0, ..Default::default() },
            AdmmConfig { rho: -1.0, ..Default::default() },
            AdmmConfig { lambda: 1.0, ..Default::default() },
            AdmmConfig { max_iter: 0, ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let q = DMatrix::<f64>::identity(3, 3);
        let w = DMatrix::<f64>::zeros(2, 2);
        assert!(matches!(
            AdmmSolver::new(&q, &w, &AdmmConfig::default()),
            Err(Error::ShapeError(_))
        ));
    }

    #[test]
    fn log_csv_formats_rows() {
        let log = [IterationRecord {
            iter: 1,
            primal_residual: 0.5,
            dual_residual: 0.1,
            objective: Some(-2.0),
        }];
        assert_eq!(log_csv(3, &log), "3,1,5e-1,1e-1,-2e0\n");
    }
}

//! End-to-end training: spectral basis, partitioning, per-partition ADMM,
//! assembly. Also the grid search and ablation runners built on top of it.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{self, AdmmConfig, AdmmSolver, IterationRecord, DENSE_BUFFERS_PER_SOLVE};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport, TestSet};
use crate::model::{assemble, ModelHeader, SimilarityModel, FORMAT_VERSION};
use crate::partition::partition;
use crate::sparse::{InteractionMatrix, MemoryBudget, NormalizedView};
use crate::spectral::truncated_svd;
use crate::SolverOptions;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Spectral rank; clipped to the matrix dimensions.
    pub k: usize,
    pub tau: f64,
    pub admm: AdmmConfig,
    pub seed: u64,
    pub solver: SolverOptions,
    pub memory_budget: MemoryBudget,
    /// Keep per-iteration ADMM records for every partition.
    pub record_admm_log: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            k: 256,
            tau: 0.25,
            admm: AdmmConfig::default(),
            seed: 0,
            solver: SolverOptions::default(),
            memory_budget: MemoryBudget::default(),
            record_admm_log: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.admm.validate()?;
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidArgument(format!("tau must be in (0, 1], got {}", self.tau)));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!("k must be >= 2, got {}", self.k)));
        }
        self.solver.validate()
    }
}

/// Wall-clock per stage plus dense-buffer accounting for the ADMM stage.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub svd_seconds: f64,
    pub partition_seconds: f64,
    pub admm_seconds: f64,
    pub assemble_seconds: f64,
    pub total_seconds: f64,
    pub k: usize,
    pub n_partitions: usize,
    pub max_partition_size: usize,
    /// Dense buffers of the largest single partition solve.
    pub peak_partition_bytes: usize,
    /// Sum of dense buffers over all partition solves.
    pub total_partition_bytes: usize,
    pub admm_unconverged: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: SimilarityModel,
    pub timing: TrainTiming,
    /// `(partition, log)` when `record_admm_log` is set.
    pub admm_logs: Vec<(usize, Vec<IterationRecord>)>,
}

impl TrainOutput {
    pub fn admm_log_csv(&self) -> String {
        let mut out = String::from("partition,iter,primal_residual,dual_residual,objective\n");
        for (p, log) in &self.admm_logs {
            out.push_str(&admm::log_csv(*p, log));
        }
        out
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Train a model on `m`.
pub fn train(m: &InteractionMatrix, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let solver = cfg.solver.with_seed(cfg.seed);
    let k = cfg.k.min(m.n_users()).min(m.n_items());
    if k < cfg.k {
        log::warn!("spectral rank {} clipped to {k}", cfg.k);
    }
    let view = NormalizedView::new(m).map_err(|e| e.in_stage("ingest"))?;
    let all: Vec<u32> = (0..m.n_items() as u32).collect();

    let t = Instant::now();
    let basis = truncated_svd(&view, &all, k, &solver).map_err(|e| e.in_stage("svd"))?;
    let svd_seconds = secs(t);
    log::info!("svd: k = {k}, {svd_seconds:.2}s");

    let t = Instant::now();
    let assignment = partition(&view, cfg.tau, &solver).map_err(|e| e.in_stage("partition"))?;
    let partition_seconds = secs(t);
    log::info!("partition: {} parts, {partition_seconds:.2}s", assignment.n_partitions());

    let t = Instant::now();
    let solved: Vec<_> = assignment
        .partitions()
        .par_iter()
        .enumerate()
        .map(|(pid, items)| -> Result<_> {
            let p = items.len();
            cfg.memory_budget.check(p, DENSE_BUFFERS_PER_SOLVE)?;
            let qhat = admm::build_qhat(m, items, &cfg.admm, cfg.memory_budget)?;
            let positions: Vec<usize> = items.iter().map(|&i| i as usize).collect();
            let w_n = basis.w_block(&positions);
            let outcome = AdmmSolver::new(&qhat, &w_n, &cfg.admm)?.run(cfg.record_admm_log)?;
            if !outcome.converged {
                log::debug!("partition {pid} ({p} items) hit max_iter");
            }
            let block = admm::prune(&outcome.state.s, cfg.admm.prune_threshold);
            let log = cfg.record_admm_log.then_some((pid, outcome.log));
            Ok(((items.clone(), block), log, outcome.converged))
        })
        .collect::<Result<_>>()
        .map_err(|e| e.in_stage("admm"))?;
    let admm_seconds = secs(t);

    let sizes: Vec<usize> = assignment.partitions().iter().map(Vec::len).collect();
    let bytes = |p: usize| p * p * DENSE_BUFFERS_PER_SOLVE * std::mem::size_of::<f64>();
    let mut timing = TrainTiming {
        svd_seconds,
        partition_seconds,
        admm_seconds,
        k,
        n_partitions: assignment.n_partitions(),
        max_partition_size: sizes.iter().copied().max().unwrap_or(0),
        peak_partition_bytes: sizes.iter().map(|&p| bytes(p)).max().unwrap_or(0),
        total_partition_bytes: sizes.iter().map(|&p| bytes(p)).sum(),
        ..Default::default()
    };
    log::info!("admm: {admm_seconds:.2}s");

    let t = Instant::now();
    let mut parts = Vec::with_capacity(solved.len());
    let mut admm_logs = Vec::new();
    for (part, log, converged) in solved {
        parts.push(part);
        admm_logs.extend(log);
        timing.admm_unconverged += usize::from(!converged);
    }
    let header = ModelHeader {
        version: FORMAT_VERSION,
        admm: cfg.admm,
        k,
        tau: cfg.tau,
        seed: cfg.seed,
        n_users: m.n_users(),
        n_items: m.n_items(),
        fingerprint: m.fingerprint(),
    };
    let model = assemble(parts, basis, cfg.admm.lambda, assignment)
        .and_then(|model| model.with_metadata(header, m.user_ids().clone(), m.item_ids().clone()))
        .map_err(|e| e.in_stage("assemble"))?;
    timing.assemble_seconds = secs(t);
    timing.total_seconds = secs(start);
    Ok(TrainOutput {
        model,
        timing,
        admm_logs,
    })
}

/// Held-out validation folds carved from a training matrix.
///
/// With `folds == 1` a single `holdout` fraction is held out; otherwise
/// interactions are dealt round-robin into `folds` groups. One interaction per
/// item is never held out so that every item keeps a training degree.
pub fn validation_splits(m: &InteractionMatrix, folds: usize, holdout: f64, seed: u64) -> Result<Vec<(InteractionMatrix, TestSet)>> {
    if folds == 0 || (folds == 1 && !(holdout > 0.0 && holdout < 1.0)) {
        return Err(Error::InvalidArgument(format!("bad validation split: folds = {folds}, holdout = {holdout}")));
    }
    let mut pairs: Vec<(u32, u32)> = (0..m.n_users())
        .flat_map(|u| m.row(u).iter().map(move |&i| (u as u32, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pairs.shuffle(&mut rng);
    let mut protected = vec![false; pairs.len()];
    let mut item_seen = vec![false; m.n_items()];
    for (e, &(_, i)) in pairs.iter().enumerate() {
        if !std::mem::replace(&mut item_seen[i as usize], true) {
            protected[e] = true;
        }
    }
    let free: Vec<usize> = (0..pairs.len()).filter(|&e| !protected[e]).collect();
    let groups: Vec<Vec<usize>> = if folds == 1 {
        let n_hold = ((pairs.len() as f64) * holdout).round() as usize;
        vec![free[..n_hold.min(free.len())].to_vec()]
    } else {
        (0..folds).map(|f| free.iter().copied().skip(f).step_by(folds).collect()).collect()
    };
    groups
        .into_iter()
        .map(|held| {
            let mut is_held = vec![false; pairs.len()];
            held.iter().for_each(|&e| is_held[e] = true);
            let train: Vec<(u32, u32)> = pairs.iter().zip(&is_held).filter(|(_, h)| !**h).map(|(p, _)| *p).collect();
            let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); m.n_users()];
            for &e in &held {
                per_user[pairs[e].0 as usize].push(pairs[e].1);
            }
            let train = InteractionMatrix::from_pairs(m.n_users(), m.n_items(), &train)?;
            let test = TestSet::from_internal(per_user.into_iter().enumerate().map(|(u, v)| (u as u32, v)).collect());
            Ok((train, test))
        })
        .collect()
}

/// Search spaces; an empty list keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub theta1: Vec<f64>,
    pub theta2: Vec<f64>,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub tau: Vec<f64>,
}

impl Grid {
    /// Every combination applied on top of `base`.
    pub fn configs(&self, base: &TrainConfig) -> Vec<TrainConfig> {
        let axis = |v: &[f64], d: f64| if v.is_empty() { vec![d] } else { v.to_vec() };
        let mut out = Vec::new();
        for t1 in axis(&self.theta1, base.admm.theta1) {
            for t2 in axis(&self.theta2, base.admm.theta2) {
                for eta in axis(&self.eta, base.admm.eta) {
                    for lambda in axis(&self.lambda, base.admm.lambda) {
                        for tau in axis(&self.tau, base.tau) {
                            let mut c = base.clone();
                            c.admm.theta1 = t1;
                            c.admm.theta2 = t2;
                            c.admm.eta = eta;
                            c.admm.lambda = lambda;
                            c.tau = tau;
                            out.push(c);
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta1: f64,
    pub theta2: f64,
    pub eta: f64,
    pub lambda: f64,
    pub tau: f64,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult {
    pub best: TrainConfig,
    pub points: Vec<GridPoint>,
}

/// Pick the config with the best mean validation Recall@K (NDCG@K breaks
/// ties, then grid order).
pub fn grid_search(m: &InteractionMatrix, base: &TrainConfig, grid: &Grid, k_eval: usize, folds: usize) -> Result<GridResult> {
    let splits = validation_splits(m, folds, 0.1, base.seed)?;
    let mut points = Vec::new();
    let mut best: Option<(TrainConfig, f64, f64)> = None;
    for cfg in grid.configs(base) {
        let (mut recall, mut ndcg) = (0.0, 0.0);
        for (train_m, test) in &splits {
            let out = train(train_m, &cfg)?;
            let r = evaluate(&out.model, train_m, test, k_eval, false)?;
            recall += r.recall_at_k / splits.len() as f64;
            ndcg += r.ndcg_at_k / splits.len() as f64;
        }
        log::info!(
            "grid θ₁={} θ₂={} η={} λ={} τ={}: recall {recall:.4} ndcg {ndcg:.4}",
            cfg.admm.theta1,
            cfg.admm.theta2,
            cfg.admm.eta,
            cfg.admm.lambda,
            cfg.tau
        );
        points.push(GridPoint {
            theta1: cfg.admm.theta1,
            theta2: cfg.admm.theta2,
            eta: cfg.admm.eta,
            lambda: cfg.admm.lambda,
            tau: cfg.tau,
            recall,
            ndcg,
        });
        if best.as_ref().map_or(true, |b| (recall, ndcg) > (b.1, b.2)) {
            best = Some((cfg, recall, ndcg));
        }
    }
    let (best, _, _) = best.expect("grid has at least one point");
    Ok(GridResult { best, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: EvalReport,
}

/// Full model and the η = 0, λ = 0, θ₂ = 0 variants, each trained and
/// evaluated on the same data.
pub fn ablate(train_m: &InteractionMatrix, test: &TestSet, cfg: &TrainConfig, k_eval: usize) -> Result<Vec<AblationRow>> {
    let variants: [(&str, fn(&mut AdmmConfig)); 4] = [
        ("full", |_| {}),
        ("eta=0", |a| a.eta = 0.0),
        ("lambda=0", |a| a.lambda = 0.0),
        ("theta2=0", |a| a.theta2 = 0.0),
    ];
    variants
        .iter()
        .map(|(name, apply)| {
            let mut c = cfg.clone();
            apply(&mut c.admm);
            let out = train(train_m, &c)?;
            let mut report = evaluate(&out.model, train_m, test, k_eval, false)?;
            report.train_seconds = out.timing.total_seconds;
            Ok(AblationRow {
                variant: (*name).to_owned(),
                report,
            })
        })
        .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(20, |r| r.report.k);
    let mut out = format!("variant,recall@{k},ndcg@{k},nnz,train_seconds\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{:.3}\n",
            r.variant, r.report.recall_at_k, r.report.ndcg_at_k, r.report.nnz, r.report.train_seconds
        ));
    }
    out
}

mod config;
mod fetch;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use fpsr::diagnostics::{self, Symmetrization};
use fpsr::eval::{evaluate, EvalReport, TestSet};
use fpsr::model::{self, binary_row, SimilarityModel};
use fpsr::partition::partition;
use fpsr::pipeline::{self, ablate, ablation_csv, grid_search};
use fpsr::sparse::{read_interactions, InteractionMatrix, NormalizedView};

use config::RunConfig;

/// Fast item-item recommender: spectral partitioning + sparse ADMM.
#[derive(Parser)]
#[command(name = "fpsr", version)]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the machine-readable report on stdout.
    #[arg(long, global = true)]
    json: bool,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

/// Every config key as a flag; flags win over the config file.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long, global = true, value_name = "PATH")]
    train: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    test: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<String>,
    /// pairs | adjacency
    #[arg(long, global = true)]
    format: Option<String>,
    #[arg(long, global = true)]
    theta1: Option<String>,
    #[arg(long, global = true)]
    theta2: Option<String>,
    #[arg(long, global = true)]
    eta: Option<String>,
    #[arg(long, global = true)]
    lambda: Option<String>,
    #[arg(long, global = true)]
    rho: Option<String>,
    #[arg(long, global = true)]
    max_iter: Option<String>,
    #[arg(long, global = true)]
    prune_threshold: Option<String>,
    #[arg(long, global = true)]
    admm_tol: Option<String>,
    /// Spectral rank.
    #[arg(long, global = true)]
    k: Option<String>,
    #[arg(long, global = true)]
    tau: Option<String>,
    /// Cutoff K for Recall@K / NDCG@K and list length for `recommend`.
    #[arg(long, global = true)]
    top_k: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    threads: Option<String>,
    #[arg(long, global = true)]
    solver_tol: Option<String>,
    #[arg(long, global = true)]
    solver_max_iter: Option<String>,
    #[arg(long, global = true)]
    oversample: Option<String>,
    #[arg(long, global = true)]
    memory_budget_gb: Option<String>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true, value_name = "LIST")]
    grid_theta1: Option<String>,
    #[arg(long, global = true, value_name = "LIST")]
    grid_theta2: Option<String>,
    #[arg(long, global = true, value_name = "LIST")]
    grid_eta: Option<String>,
    #[arg(long, global = true, value_name = "LIST")]
    grid_lambda: Option<String>,
    #[arg(long, global = true, value_name = "LIST")]
    grid_tau: Option<String>,
    #[arg(long, global = true)]
    folds: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("train", &self.train),
            ("test", &self.test),
            ("model", &self.model),
            ("format", &self.format),
            ("theta1", &self.theta1),
            ("theta2", &self.theta2),
            ("eta", &self.eta),
            ("lambda", &self.lambda),
            ("rho", &self.rho),
            ("max_iter", &self.max_iter),
            ("prune_threshold", &self.prune_threshold),
            ("admm_tol", &self.admm_tol),
            ("k", &self.k),
            ("tau", &self.tau),
            ("top_k", &self.top_k),
            ("seed", &self.seed),
            ("threads", &self.threads),
            ("solver_tol", &self.solver_tol),
            ("solver_max_iter", &self.solver_max_iter),
            ("oversample", &self.oversample),
            ("memory_budget_gb", &self.memory_budget_gb),
            ("dataset", &self.dataset),
            ("grid_theta1", &self.grid_theta1),
            ("grid_theta2", &self.grid_theta2),
            ("grid_eta", &self.grid_eta),
            ("grid_lambda", &self.grid_lambda),
            ("grid_tau", &self.grid_tau),
            ("folds", &self.folds),
        ]
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse an interaction file and print its statistics.
    Ingest,
    /// Train a model (grid search first when any grid_* key is set).
    Train {
        /// Write the per-iteration ADMM log as CSV.
        #[arg(long)]
        admm_log: Option<PathBuf>,
        /// Write the partition recursion trace as CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Recall@K / NDCG@K of a saved model on a test split.
    Evaluate {
        /// Write per-user metrics as CSV.
        #[arg(long)]
        per_user: Option<PathBuf>,
    },
    /// Top-K lists as `user_id<TAB>rank<TAB>item_id<TAB>score`.
    Recommend {
        /// Comma-separated external user ids (default: every training user).
        #[arg(long)]
        users: Option<String>,
        /// Allow items the user already interacted with.
        #[arg(long)]
        include_seen: bool,
    },
    /// Full model against the η = 0, λ = 0 and θ₂ = 0 variants.
    Ablate {
        /// Write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Partition and graph diagnostics.
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
    /// Download dataset files listed in a manifest.
    FetchDataset {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "data")]
        dest: PathBuf,
    },
}

#[derive(Subcommand)]
enum Diagnose {
    /// Recursion trace of the item partitioning.
    Partitions {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Connectivity of the sampled item graph against neighbor count.
    Connectivity {
        #[arg(long, default_value_t = 1)]
        k_min: usize,
        #[arg(long, default_value_t = 20)]
        k_max: usize,
        /// Add both directed weights instead of keeping the larger one.
        #[arg(long)]
        directed_sum: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &cli.config {
        cfg.apply_file(path)?;
    }
    for (key, value) in cli.overrides.pairs() {
        if let Some(v) = value {
            cfg.set(key, v).with_context(|| format!("--{}", key.replace('_', "-")))?;
        }
    }
    cfg.validate()?;
    if let Some(n) = cfg.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let out = Output { json: cli.json };
    match cli.command {
        Command::Ingest => ingest(&cfg, &out),
        Command::Train { admm_log, trace } => train(&cfg, &out, admm_log.as_deref(), trace.as_deref()),
        Command::Evaluate { per_user } => evaluate_cmd(&cfg, &out, per_user.as_deref()),
        Command::Recommend { users, include_seen } => recommend(&cfg, &out, users.as_deref(), include_seen),
        Command::Ablate { out: csv } => ablate_cmd(&cfg, &out, csv.as_deref()),
        Command::Diagnose { what } => diagnose(&cfg, &out, what),
        Command::FetchDataset { manifest, dest } => {
            let name = cfg.dataset.as_deref().context("missing `dataset` (config key or --dataset)")?;
            let text = std::fs::read_to_string(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
            let files = fetch::fetch(&fetch::parse_manifest(&text)?, name, &dest)?;
            out.emit(&json!({ "dataset": name, "files": files }), || {
                files.iter().map(|f| format!("{}\n", f.display())).collect()
            })
        }
    }
}

struct Output {
    json: bool,
}

impl Output {
    fn emit<T: Serialize>(&self, report: &T, text: impl FnOnce() -> String) -> Result<()> {
        let mut stdout = std::io::stdout().lock();
        if self.json {
            serde_json::to_writer_pretty(&mut stdout, report)?;
            writeln!(stdout)?;
        } else {
            stdout.write_all(text().as_bytes())?;
        }
        Ok(())
    }
}

fn load_matrix(cfg: &RunConfig, path: &Path) -> Result<InteractionMatrix> {
    let records = read_interactions(path, cfg.format).with_context(|| format!("reading {}", path.display()))?;
    Ok(InteractionMatrix::ingest(records)?)
}

fn load_test(cfg: &RunConfig, model: &SimilarityModel) -> Result<TestSet> {
    let path = cfg.require(&cfg.test, "test")?;
    let records = read_interactions(path, cfg.format).with_context(|| format!("reading {}", path.display()))?;
    Ok(TestSet::from_records(records, model.user_ids(), model.item_ids())?)
}

/// Training interactions re-indexed with the model's id maps.
fn aligned_train(cfg: &RunConfig, model: &SimilarityModel) -> Result<InteractionMatrix> {
    let path = cfg.require(&cfg.train, "train")?;
    let records = read_interactions(path, cfg.format).with_context(|| format!("reading {}", path.display()))?;
    let mut pairs = Vec::with_capacity(records.len());
    let mut dropped = 0usize;
    for (u, i) in &records {
        match (model.user_ids().get(u), model.item_ids().get(i)) {
            (Some(u), Some(i)) => pairs.push((u, i)),
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("{dropped} training records reference ids unknown to the model");
    }
    let m = InteractionMatrix::from_pairs(model.user_ids().len(), model.n_items(), &pairs)?;
    if m.fingerprint() != model.header().fingerprint {
        log::warn!("training file does not match the model's training fingerprint");
    }
    Ok(m)
}

fn ingest(cfg: &RunConfig, out: &Output) -> Result<()> {
    let m = load_matrix(cfg, cfg.require(&cfg.train, "train")?)?;
    let report = json!({
        "n_users": m.n_users(),
        "n_items": m.n_items(),
        "nnz": m.nnz(),
        "density": m.nnz() as f64 / (m.n_users() as f64 * m.n_items() as f64),
        "fingerprint": format!("{:08x}", m.fingerprint()),
    });
    out.emit(&report, || {
        format!(
            "users     {}\nitems     {}\nnnz       {}\ndensity   {:.3e}\n",
            m.n_users(),
            m.n_items(),
            m.nnz(),
            report["density"].as_f64().unwrap_or(0.0)
        )
    })
}

fn train(cfg: &RunConfig, out: &Output, admm_log: Option<&Path>, trace: Option<&Path>) -> Result<()> {
    let m = load_matrix(cfg, cfg.require(&cfg.train, "train")?)?;
    let model_path = cfg.require(&cfg.model, "model")?;
    let mut train_cfg = cfg.train_config();
    let mut grid = None;
    if cfg.has_grid() {
        let result = grid_search(&m, &train_cfg, &cfg.grid, cfg.top_k, cfg.folds)?;
        train_cfg = result.best.clone();
        grid = Some(result.points);
    }
    train_cfg.record_admm_log = admm_log.is_some();
    let output = pipeline::train(&m, &train_cfg)?;
    model::save(&output.model, model_path)?;
    if let Some(path) = admm_log {
        std::fs::write(path, output.admm_log_csv())?;
    }
    if let Some(path) = trace {
        std::fs::write(path, output.model.assignment().trace_csv())?;
    }
    let eval = match &cfg.test {
        Some(_) => {
            let test = load_test(cfg, &output.model)?;
            let mut r = evaluate(&output.model, &m, &test, cfg.top_k, false)?;
            r.train_seconds = output.timing.total_seconds;
            Some(r)
        }
        None => None,
    };
    let model = &output.model;
    let report = json!({
        "model": model_path,
        "header": model.header(),
        "timing": output.timing,
        "nnz": model.s().nnz(),
        "n_parameters": model.n_parameters(),
        "n_sparse_parameters": model.n_sparse_parameters(),
        "grid": grid,
        "eval": eval,
    });
    out.emit(&report, || {
        let t = &output.timing;
        let mut s = format!(
            "model       {}\npartitions  {} (largest {})\nnnz(S)      {}\nsvd         {:.2}s\npartition   {:.2}s\nadmm        {:.2}s\nassemble    {:.2}s\ntotal       {:.2}s\n",
            model_path.display(),
            t.n_partitions,
            t.max_partition_size,
            model.s().nnz(),
            t.svd_seconds,
            t.partition_seconds,
            t.admm_seconds,
            t.assemble_seconds,
            t.total_seconds
        );
        if let Some(e) = &eval {
            s.push_str(&e.to_table());
        }
        s
    })
}

fn evaluate_cmd(cfg: &RunConfig, out: &Output, per_user: Option<&Path>) -> Result<()> {
    let model = model::load(cfg.require(&cfg.model, "model")?)?;
    let m = aligned_train(cfg, &model)?;
    let test = load_test(cfg, &model)?;
    let report: EvalReport = evaluate(&model, &m, &test, cfg.top_k, per_user.is_some())?;
    if let (Some(path), Some(rows)) = (per_user, &report.per_user) {
        let mut csv = String::from("user_id,recall,ndcg\n");
        for r in rows {
            csv.push_str(&format!("{},{:.6},{:.6}\n", model.user_ids().external(r.user), r.recall, r.ndcg));
        }
        std::fs::write(path, csv)?;
    }
    out.emit(&report, || report.to_table())
}

fn recommend(cfg: &RunConfig, out: &Output, users: Option<&str>, include_seen: bool) -> Result<()> {
    let model = model::load(cfg.require(&cfg.model, "model")?)?;
    let m = aligned_train(cfg, &model)?;
    let ids: Vec<u32> = match users {
        Some(list) => list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|u| model.user_ids().get(u).with_context(|| format!("unknown user {u:?}")))
            .collect::<Result<_>>()?,
        None => (0..m.n_users() as u32).collect(),
    };
    let mut rows = Vec::new();
    for u in ids {
        let recs = model.recommend(&binary_row(m.row(u as usize)), cfg.top_k, !include_seen)?;
        for (rank, (item, score)) in recs.into_iter().enumerate() {
            rows.push((model.user_ids().external(u).to_owned(), rank + 1, model.item_ids().external(item).to_owned(), score));
        }
    }
    let report: Vec<_> = rows
        .iter()
        .map(|(u, r, i, s)| json!({ "user_id": u, "rank": r, "item_id": i, "score": s }))
        .collect();
    out.emit(&report, || {
        rows.iter().map(|(u, r, i, s)| format!("{u}\t{r}\t{i}\t{s:.6}\n")).collect()
    })
}

fn ablate_cmd(cfg: &RunConfig, out: &Output, csv: Option<&Path>) -> Result<()> {
    let m = load_matrix(cfg, cfg.require(&cfg.train, "train")?)?;
    let path = cfg.require(&cfg.test, "test")?;
    let records = read_interactions(path, cfg.format)?;
    let test = TestSet::from_records(records, m.user_ids(), m.item_ids())?;
    let rows = ablate(&m, &test, &cfg.train_config(), cfg.top_k)?;
    let table = ablation_csv(&rows);
    if let Some(p) = csv {
        std::fs::write(p, &table)?;
    }
    out.emit(&rows, || table)
}

fn diagnose(cfg: &RunConfig, out: &Output, what: Diagnose) -> Result<()> {
    let m = load_matrix(cfg, cfg.require(&cfg.train, "train")?)?;
    let solver = cfg.solver.with_seed(cfg.seed);
    match what {
        Diagnose::Partitions { out: csv } => {
            let start = Instant::now();
            let view = NormalizedView::new(&m)?;
            let asg = partition(&view, cfg.tau, &solver)?;
            let trace = asg.trace_csv();
            if let Some(p) = csv {
                std::fs::write(p, &trace)?;
            }
            let sizes: Vec<usize> = asg.partitions().iter().map(Vec::len).collect();
            let unsplittable = (0..asg.n_partitions()).filter(|&p| asg.is_unsplittable(p)).count();
            let report = json!({
                "tau": cfg.tau,
                "n_partitions": asg.n_partitions(),
                "sizes": sizes,
                "unsplittable": unsplittable,
                "seconds": start.elapsed().as_secs_f64(),
                "trace": asg.trace(),
            });
            out.emit(&report, || trace)
        }
        Diagnose::Connectivity {
            k_min,
            k_max,
            directed_sum,
            out: csv,
        } => {
            if k_min == 0 || k_min > k_max {
                bail!("need 1 <= k-min <= k-max");
            }
            let mode = if directed_sum { Symmetrization::DirectedSum } else { Symmetrization::Union };
            let curve = diagnostics::connectivity_curve(&m, k_min, k_max, mode, &solver)?;
            let table = diagnostics::curve_csv(&curve);
            if let Some(p) = csv {
                std::fs::write(p, &table)?;
            }
            out.emit(&curve, || table)
        }
    }
}

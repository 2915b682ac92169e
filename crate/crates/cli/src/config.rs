//! Flat `key = value` run configuration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fpsr::admm::AdmmConfig;
use fpsr::pipeline::{Grid, TrainConfig};
use fpsr::sparse::{InputFormat, MemoryBudget};
use fpsr::SolverOptions;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub format: InputFormat,
    pub admm: AdmmConfig,
    pub k: usize,
    pub tau: f64,
    pub top_k: usize,
    pub seed: u64,
    pub threads: Option<usize>,
    pub solver: SolverOptions,
    pub memory_budget_gb: Option<f64>,
    pub dataset: Option<String>,
    pub grid: Grid,
    pub folds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: None,
            test: None,
            model: None,
            format: InputFormat::Pairs,
            admm: AdmmConfig::default(),
            k: 256,
            tau: 0.25,
            top_k: 20,
            seed: 0,
            threads: None,
            solver: SolverOptions::default(),
            memory_budget_gb: None,
            dataset: None,
            grid: Grid::default(),
            folds: 1,
        }
    }
}

#[cfg(test)]
const KEYS: &[&str] = &[
    "train",
    "test",
    "model",
    "format",
    "theta1",
    "theta2",
    "eta",
    "lambda",
    "rho",
    "max_iter",
    "prune_threshold",
    "admm_tol",
    "k",
    "tau",
    "top_k",
    "seed",
    "threads",
    "solver_tol",
    "solver_max_iter",
    "oversample",
    "memory_budget_gb",
    "dataset",
    "grid_theta1",
    "grid_theta2",
    "grid_eta",
    "grid_lambda",
    "grid_tau",
    "folds",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| anyhow::anyhow!("{key} = {value:?}: {e}"))
}

fn list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| num(key, s))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        let v = value.trim();
        match key.as_str() {
            "train" => self.train = Some(v.into()),
            "test" => self.test = Some(v.into()),
            "model" => self.model = Some(v.into()),
            "format" => {
                self.format = match v {
                    "pairs" => InputFormat::Pairs,
                    "adjacency" => InputFormat::Adjacency,
                    _ => bail!("format must be pairs or adjacency, got {v:?}"),
                }
            }
            "theta1" => self.admm.theta1 = num(&key, v)?,
            "theta2" => self.admm.theta2 = num(&key, v)?,
            "eta" => self.admm.eta = num(&key, v)?,
            "lambda" => self.admm.lambda = num(&key, v)?,
            "rho" => self.admm.rho = num(&key, v)?,
            "max_iter" => self.admm.max_iter = num(&key, v)?,
            "prune_threshold" => self.admm.prune_threshold = num(&key, v)?,
            "admm_tol" => self.admm.tol = num(&key, v)?,
            "k" => self.k = num(&key, v)?,
            "tau" => self.tau = num(&key, v)?,
            "top_k" => self.top_k = num(&key, v)?,
            "seed" => self.seed = num(&key, v)?,
            "threads" => self.threads = Some(num(&key, v)?),
            "solver_tol" => self.solver.tol = num(&key, v)?,
            "solver_max_iter" => self.solver.max_iter = num(&key, v)?,
            "oversample" => self.solver.oversample = num(&key, v)?,
            "memory_budget_gb" => self.memory_budget_gb = Some(num(&key, v)?),
            "dataset" => self.dataset = Some(v.to_owned()),
            "grid_theta1" => self.grid.theta1 = list(&key, v)?,
            "grid_theta2" => self.grid.theta2 = list(&key, v)?,
            "grid_eta" => self.grid.eta = list(&key, v)?,
            "grid_lambda" => self.grid.lambda = list(&key, v)?,
            "grid_tau" => self.grid.tau = list(&key, v)?,
            "folds" => self.folds = num(&key, v)?,
            _ => bail!("unknown config key {key:?}"),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .with_context(|| format!("{origin}:{}: expected `key = value`", n + 1))?;
            self.set(key.trim(), value).with_context(|| format!("{origin}:{}", n + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.top_k == 0 {
            bail!("top_k must be >= 1");
        }
        if self.folds == 0 {
            bail!("folds must be >= 1");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            k: self.k,
            tau: self.tau,
            admm: self.admm,
            seed: self.seed,
            solver: self.solver,
            memory_budget: self
                .memory_budget_gb
                .map_or_else(MemoryBudget::default, |gb| MemoryBudget((gb * (1u64 << 30) as f64) as usize)),
            record_admm_log: false,
        }
    }

    pub fn has_grid(&self) -> bool {
        let g = &self.grid;
        [&g.theta1, &g.theta2, &g.eta, &g.lambda, &g.tau].iter().any(|v| !v.is_empty())
    }

    pub fn require<'a>(&self, path: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        path.as_deref().with_context(|| format!("missing `{key}` (config key or --{key})"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_file_text() {
        let mut c = RunConfig::default();
        c.apply_text("# comment\n\ntheta1 = 0.2  # trailing\nmax-iter=20\ngrid_lambda = 0.1, 0.5\n", "t").unwrap();
        assert_eq!(c.admm.theta1, 0.2);
        assert_eq!(c.admm.max_iter, 20);
        assert_eq!(c.grid.lambda, vec![0.1, 0.5]);
        assert!(c.has_grid());
    }

    #[test]
    fn rejects_bad_lines() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("theta1 0.2", "t").is_err());
        assert!(c.apply_text("nope = 1", "t").is_err());
        assert!(c.apply_text("k = x", "t").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        for key in KEYS {
            let value = match *key {
                "format" => "pairs",
                "train" | "test" | "model" | "dataset" => "x",
                "grid_theta1" | "grid_theta2" | "grid_eta" | "grid_lambda" | "grid_tau" => "0.1",
                _ => "1",
            };
            RunConfig::default().set(key, value).unwrap();
        }
    }

    #[test]
    fn validation_uses_ranges() {
        let mut c = RunConfig::default();
        c.set("tau", "1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("k", "1").unwrap();
        assert!(c.validate().is_err());
    }
}

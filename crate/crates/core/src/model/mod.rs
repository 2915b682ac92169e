//! The assembled scoring matrix `C = λW + S` and top-K ranking.
//!
//! `W` stays factored inside the [`SpectralBasis`]; `S` is a global CSR
//! matrix whose non-zeros all fall inside the partition blocks.

mod format;

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use format::{load, save, FORMAT_VERSION};

use crate::admm::{AdmmConfig, SparseBlock};
use crate::error::{Error, Result};
use crate::partition::PartitionAssignment;
use crate::spectral::SpectralBasis;
use crate::sparse::IdMap;

/// Hyperparameters and training metadata stored with a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub version: u32,
    pub admm: AdmmConfig,
    pub k: usize,
    pub tau: f64,
    pub seed: u64,
    pub n_users: usize,
    pub n_items: usize,
    /// CRC32 of the training matrix pattern.
    pub fingerprint: u32,
}

/// Global item-item sparse matrix in CSR form.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimilarityCsr {
    pub n: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SimilarityCsr {
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> (&[u32], &[f64]) {
        let r = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[r.clone()], &self.values[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (cols, vals) = self.row(i);
        cols.binary_search(&(j as u32)).map_or(0.0, |p| vals[p])
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            let (cols, vals) = self.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                d[(i, j as usize)] = v;
            }
        }
        d
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityModel {
    header: ModelHeader,
    lambda: f64,
    basis: SpectralBasis,
    s: SimilarityCsr,
    assignment: PartitionAssignment,
    user_ids: IdMap,
    item_ids: IdMap,
}

/// Place each partition block into the global `S`.
///
/// `parts` pairs an item list with the solved block, whose rows and columns
/// follow that list's order. Every partition of `assignment` must appear
/// exactly once.
pub fn assemble(
    parts: Vec<(Vec<u32>, SparseBlock)>,
    basis: SpectralBasis,
    lambda: f64,
    assignment: PartitionAssignment,
) -> Result<SimilarityModel> {
    let n = assignment.assignment().len();
    if basis.n_items() != n || basis.items().iter().enumerate().any(|(a, &i)| a != i as usize) {
        return Err(Error::AssemblyMismatch(format!(
            "basis must span items 0..{n} in order (has {} items)",
            basis.n_items()
        )));
    }
    let mut seen = vec![false; assignment.n_partitions()];
    let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
    for (items, block) in parts {
        let first = *items
            .first()
            .ok_or_else(|| Error::AssemblyMismatch("empty item list".into()))?;
        let pid = *assignment
            .assignment()
            .get(first as usize)
            .ok_or_else(|| Error::AssemblyMismatch(format!("item {first} out of range")))? as usize;
        let mut sorted = items.clone();
        sorted.sort_unstable();
        if sorted != assignment.partitions()[pid] {
            return Err(Error::AssemblyMismatch(format!(
                "item list starting at {first} does not match partition {pid}"
            )));
        }
        if std::mem::replace(&mut seen[pid], true) {
            return Err(Error::AssemblyMismatch(format!("partition {pid} supplied twice")));
        }
        if block.size != items.len() {
            return Err(Error::AssemblyMismatch(format!(
                "block of size {} for partition {pid} with {} items",
                block.size,
                items.len()
            )));
        }
        for (a, &i) in items.iter().enumerate() {
            let (cols, vals) = block.row(a);
            rows[i as usize].extend(cols.iter().zip(vals).map(|(&b, &v)| (items[b as usize], v)));
        }
    }
    if let Some(pid) = seen.iter().position(|s| !s) {
        return Err(Error::AssemblyMismatch(format!("partition {pid} missing")));
    }
    let mut s = SimilarityCsr {
        n,
        indptr: Vec::with_capacity(n + 1),
        ..Default::default()
    };
    s.indptr.push(0);
    for mut row in rows {
        row.sort_unstable_by_key(|e| e.0);
        for (j, v) in row {
            s.indices.push(j);
            s.values.push(v);
        }
        s.indptr.push(s.indices.len());
    }
    let header = ModelHeader {
        version: FORMAT_VERSION,
        admm: AdmmConfig {
            lambda,
            ..Default::default()
        },
        k: basis.k(),
        tau: assignment.tau(),
        seed: 0,
        n_users: 0,
        n_items: n,
        fingerprint: 0,
    };
    Ok(SimilarityModel {
        header,
        lambda,
        basis,
        s,
        assignment,
        user_ids: IdMap::new(),
        item_ids: IdMap::sequential(n),
    })
}

/// `(item, score)` ordered by score descending, then item id ascending.
fn rank_cmp(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Best `k` entries of `scores` among items not rejected by `skip`.
pub fn top_k(scores: &[f64], k: usize, skip: impl Fn(u32) -> bool) -> Vec<(u32, f64)> {
    let mut cand: Vec<(u32, f64)> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| (i as u32, s))
        .filter(|&(i, _)| !skip(i))
        .collect();
    if k == 0 {
        return Vec::new();
    }
    if cand.len() > k {
        cand.select_nth_unstable_by(k - 1, rank_cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(rank_cmp);
    cand
}

impl SimilarityModel {
    /// Attach training metadata and id maps.
    pub fn with_metadata(mut self, header: ModelHeader, user_ids: IdMap, item_ids: IdMap) -> Result<Self> {
        if item_ids.len() != self.n_items() || header.n_items != self.n_items() {
            return Err(Error::ShapeError(format!(
                "model has {} items, metadata describes {} / {}",
                self.n_items(),
                item_ids.len(),
                header.n_items
            )));
        }
        self.header = header;
        self.user_ids = user_ids;
        self.item_ids = item_ids;
        Ok(self)
    }

    pub(crate) fn from_parts(
        header: ModelHeader,
        lambda: f64,
        basis: SpectralBasis,
        s: SimilarityCsr,
        assignment: PartitionAssignment,
        user_ids: IdMap,
        item_ids: IdMap,
    ) -> Self {
        Self {
            header,
            lambda,
            basis,
            s,
            assignment,
            user_ids,
            item_ids,
        }
    }

    pub fn header(&self) -> &ModelHeader {
        &self.header
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn basis(&self) -> &SpectralBasis {
        &self.basis
    }

    pub fn s(&self) -> &SimilarityCsr {
        &self.s
    }

    pub fn assignment(&self) -> &PartitionAssignment {
        &self.assignment
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.item_ids
    }

    pub fn n_items(&self) -> usize {
        self.s.n
    }

    /// Same model with `λ` and every entry of `S` multiplied by `c`.
    pub fn rescaled(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.lambda *= c;
        for v in &mut out.s.values {
            *v *= c;
        }
        out
    }

    /// Stored parameters: CSR arrays of `S` (≈ 2·NNZ) plus `V`, `σ` and the
    /// two degree scalings.
    pub fn n_parameters(&self) -> usize {
        self.n_sparse_parameters() + self.basis.n_items() * self.basis.k() + self.basis.k() + 2 * self.basis.n_items()
    }

    /// CSR-convention count for `S` alone: values plus column indices.
    pub fn n_sparse_parameters(&self) -> usize {
        2 * self.s.nnz()
    }

    /// `r_u C = λ·r_u W + r_u S` for a sparse row of `(item, value)` pairs.
    pub fn score(&self, user_row: &[(u32, f64)]) -> Result<Vec<f64>> {
        let mut out = if self.lambda != 0.0 {
            let mut g = self.basis.score(user_row)?;
            for x in &mut g {
                *x *= self.lambda;
            }
            g
        } else {
            if let Some(&(i, _)) = user_row.iter().find(|&&(i, _)| i as usize >= self.n_items()) {
                return Err(Error::ShapeError(format!("item {i} outside model of {} items", self.n_items())));
            }
            vec![0.0; self.n_items()]
        };
        for &(i, val) in user_row {
            let (cols, vals) = self.s.row(i as usize);
            for (&j, &v) in cols.iter().zip(vals) {
                out[j as usize] += val * v;
            }
        }
        Ok(out)
    }

    /// Scores for a batch of rows, one output row each.
    pub fn score_batch(&self, rows: &[&[(u32, f64)]]) -> Result<DMatrix<f64>> {
        let n = self.n_items();
        for row in rows {
            if let Some(&(i, _)) = row.iter().find(|&&(i, _)| i as usize >= n) {
                return Err(Error::ShapeError(format!("item {i} outside model of {n} items")));
            }
        }
        let mut out = if self.lambda != 0.0 {
            let t = self.basis.project_rows(rows);
            let mut g = t * self.basis.v().transpose();
            for (j, mut col) in g.column_iter_mut().enumerate() {
                col *= self.lambda * self.basis.d_sqrt()[j];
            }
            g
        } else {
            DMatrix::zeros(rows.len(), n)
        };
        for (r, row) in rows.iter().enumerate() {
            for &(i, val) in row.iter() {
                let (cols, vals) = self.s.row(i as usize);
                for (&j, &v) in cols.iter().zip(vals) {
                    out[(r, j as usize)] += val * v;
                }
            }
        }
        Ok(out)
    }

    /// Top-`k` items for a user row. With `mask_seen`, items present in the
    /// row are never recommended. Returns fewer than `k` when candidates run out.
    pub fn recommend(&self, user_row: &[(u32, f64)], k: usize, mask_seen: bool) -> Result<Vec<(u32, f64)>> {
        if k == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        let scores = self.score(user_row)?;
        Ok(rank_scores(&scores, user_row, k, mask_seen))
    }
}

pub(crate) fn rank_scores(scores: &[f64], user_row: &[(u32, f64)], k: usize, mask_seen: bool) -> Vec<(u32, f64)> {
    if mask_seen {
        let mut seen: Vec<u32> = user_row.iter().map(|e| e.0).collect();
        seen.sort_unstable();
        top_k(scores, k, |i| seen.binary_search(&i).is_ok())
    } else {
        top_k(scores, k, |_| false)
    }
}

/// Binary user row from a list of internal item ids.
pub fn binary_row(items: &[u32]) -> Vec<(u32, f64)> {
    items.iter().map(|&i| (i, 1.0)).collect()
}

//! Interaction matrix storage and the sparse kernels built on it.
//!
//! The user-item matrix is binary, so only the sparsity pattern is stored, in
//! both row-major (per user) and column-major (per item) order. Internal ids
//! are dense and assigned by first appearance in the input.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Bidirectional mapping between external ids and dense internal ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, u32>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from external ids listed in internal-id order.
    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate external id {id:?}")));
            }
        }
        Ok(Self { ids, index })
    }

    /// Numeric ids "0".."n-1".
    pub fn sequential(n: usize) -> Self {
        Self::from_ids((0..n).map(|i| i.to_string()).collect()).expect("sequential ids are unique")
    }

    pub fn get_or_insert(&mut self, id: &str) -> u32 {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len() as u32;
        self.ids.push(id.to_owned());
        self.index.insert(id.to_owned(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<u32> {
        self.index.get(id).copied()
    }

    pub fn external(&self, internal: u32) -> &str {
        &self.ids[internal as usize]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Line layout of an interaction file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InputFormat {
    /// `user<TAB or comma>item[<sep>ignored...]`, one interaction per line.
    #[default]
    Pairs,
    /// `user item item ...`, whitespace separated, one user per line.
    Adjacency,
}

/// Parse interaction records. Blank lines and `#` comments are skipped.
pub fn parse_interactions<R: BufRead>(reader: R, format: InputFormat) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut warned_extra = false;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        match format {
            InputFormat::Pairs => {
                let fields: Vec<&str> = if line.contains('\t') {
                    line.split('\t').collect()
                } else if line.contains(',') {
                    line.split(',').collect()
                } else {
                    line.split_whitespace().collect()
                };
                let user = fields.first().map(|s| s.trim()).unwrap_or("");
                let item = fields.get(1).map(|s| s.trim()).unwrap_or("");
                if user.is_empty() || item.is_empty() {
                    return Err(Error::IngestParse {
                        line: lineno + 1,
                        message: format!("expected `user<sep>item`, got {line:?}"),
                    });
                }
                if fields.len() > 2 && !warned_extra {
                    warn!("line {}: extra columns (ratings, timestamps) are ignored", lineno + 1);
                    warned_extra = true;
                }
                out.push((user.to_owned(), item.to_owned()));
            }
            InputFormat::Adjacency => {
                let mut fields = line.split_whitespace();
                let user = fields.next().expect("non-empty line has a field");
                for item in fields {
                    out.push((user.to_owned(), item.to_owned()));
                }
            }
        }
    }
    Ok(out)
}

pub fn read_interactions(path: impl AsRef<Path>, format: InputFormat) -> Result<Vec<(String, String)>> {
    let file = File::open(path)?;
    parse_interactions(BufReader::new(file), format)
}

/// Binary user-item interaction matrix `R` with cached degree vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    n_users: usize,
    n_items: usize,
    row_ptr: Vec<usize>,
    row_items: Vec<u32>,
    col_ptr: Vec<usize>,
    col_users: Vec<u32>,
    user_degrees: Vec<f64>,
    item_degrees: Vec<f64>,
    user_ids: IdMap,
    item_ids: IdMap,
}

impl InteractionMatrix {
    /// Ingest `(user, item)` records, assigning internal ids by first appearance
    /// and dropping duplicate pairs.
    pub fn ingest<I, U, T>(records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (U, T)>,
        U: AsRef<str>,
        T: AsRef<str>,
    {
        let mut user_ids = IdMap::new();
        let mut item_ids = IdMap::new();
        let mut pairs = Vec::new();
        for (u, i) in records {
            let u = user_ids.get_or_insert(u.as_ref());
            let i = item_ids.get_or_insert(i.as_ref());
            pairs.push((u, i));
        }
        if pairs.is_empty() {
            return Err(Error::IngestEmpty);
        }
        // Ids are only minted for ids that appear in a record, so no row or
        // column can end up empty here.
        Self::build(user_ids, item_ids, pairs)
    }

    /// Build from internal indices. Empty rows and columns are kept, which is
    /// what the degenerate-input paths need.
    pub fn from_pairs(n_users: usize, n_items: usize, pairs: &[(u32, u32)]) -> Result<Self> {
        if let Some(&(u, i)) = pairs
            .iter()
            .find(|&&(u, i)| u as usize >= n_users || i as usize >= n_items)
        {
            return Err(Error::InvalidArgument(format!(
                "pair ({u}, {i}) outside {n_users}x{n_items}"
            )));
        }
        Self::build(IdMap::sequential(n_users), IdMap::sequential(n_items), pairs.to_vec())
    }

    /// Build from a dense 0/1 matrix, given row by row (tests and toy inputs).
    pub fn from_dense_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n_items = rows.first().map_or(0, Vec::len);
        let mut pairs = Vec::new();
        for (u, row) in rows.iter().enumerate() {
            if row.len() != n_items {
                return Err(Error::ShapeError(format!("row {u} has {} columns, expected {n_items}", row.len())));
            }
            pairs.extend(row.iter().enumerate().filter(|(_, &v)| v != 0).map(|(i, _)| (u as u32, i as u32)));
        }
        Self::from_pairs(rows.len(), n_items, &pairs)
    }

    fn build(user_ids: IdMap, item_ids: IdMap, mut pairs: Vec<(u32, u32)>) -> Result<Self> {
        let n_users = user_ids.len();
        let n_items = item_ids.len();
        pairs.sort_unstable();
        pairs.dedup();

        let mut row_ptr = vec![0usize; n_users + 1];
        let mut col_ptr = vec![0usize; n_items + 1];
        for &(u, i) in &pairs {
            row_ptr[u as usize + 1] += 1;
            col_ptr[i as usize + 1] += 1;
        }
        for k in 0..n_users {
            row_ptr[k + 1] += row_ptr[k];
        }
        for k in 0..n_items {
            col_ptr[k + 1] += col_ptr[k];
        }
        let row_items: Vec<u32> = pairs.iter().map(|&(_, i)| i).collect();
        // Pairs are sorted by user, so filling columns in order keeps each
        // column's user list sorted.
        let mut col_users = vec![0u32; pairs.len()];
        let mut next = col_ptr.clone();
        for &(u, i) in &pairs {
            col_users[next[i as usize]] = u;
            next[i as usize] += 1;
        }
        let user_degrees = row_ptr.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        let item_degrees = col_ptr.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
        Ok(Self {
            n_users,
            n_items,
            row_ptr,
            row_items,
            col_ptr,
            col_users,
            user_degrees,
            item_degrees,
            user_ids,
            item_ids,
        })
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn nnz(&self) -> usize {
        self.row_items.len()
    }

    /// Items of user `u`, ascending.
    pub fn row(&self, u: usize) -> &[u32] {
        &self.row_items[self.row_ptr[u]..self.row_ptr[u + 1]]
    }

    /// Users of item `i`, ascending.
    pub fn col(&self, i: usize) -> &[u32] {
        &self.col_users[self.col_ptr[i]..self.col_ptr[i + 1]]
    }

    pub fn contains(&self, u: usize, i: u32) -> bool {
        self.row(u).binary_search(&i).is_ok()
    }

    pub fn user_degrees(&self) -> &[f64] {
        &self.user_degrees
    }

    pub fn item_degrees(&self) -> &[f64] {
        &self.item_degrees
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.item_ids
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn row_items(&self) -> &[u32] {
        &self.row_items
    }

    /// CRC32 over shape and sparsity pattern.
    pub fn fingerprint(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&(self.n_users as u64).to_le_bytes());
        h.update(&(self.n_items as u64).to_le_bytes());
        for &p in &self.row_ptr {
            h.update(&(p as u64).to_le_bytes());
        }
        for &i in &self.row_items {
            h.update(&i.to_le_bytes());
        }
        h.finalize()
    }

    /// Dense copy of `R` (tests and oracles).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_users, self.n_items);
        for u in 0..self.n_users {
            for &i in self.row(u) {
                d[(u, i as usize)] = 1.0;
            }
        }
        d
    }

    /// Restrict the columns to `items` (kept in the given order), keeping all users.
    pub fn restrict(&self, items: &[u32]) -> Result<SubMatrix> {
        let local = local_positions(self.n_items, items)?;
        let mut row_ptr = Vec::with_capacity(self.n_users + 1);
        let mut row_cols = Vec::new();
        row_ptr.push(0);
        for u in 0..self.n_users {
            let start = row_cols.len();
            row_cols.extend(self.row(u).iter().filter_map(|&i| local[i as usize]));
            row_cols[start..].sort_unstable();
            row_ptr.push(row_cols.len());
        }
        let mut col_ptr = Vec::with_capacity(items.len() + 1);
        let mut col_rows = Vec::new();
        col_ptr.push(0);
        for &i in items {
            col_rows.extend_from_slice(self.col(i as usize));
            col_ptr.push(col_rows.len());
        }
        Ok(SubMatrix {
            n_rows: self.n_users,
            n_cols: items.len(),
            row_ptr,
            row_cols,
            col_ptr,
            col_rows,
        })
    }
}

/// Map global item index -> position in `items`; rejects duplicates and out-of-range ids.
pub(crate) fn local_positions(n_items: usize, items: &[u32]) -> Result<Vec<Option<u32>>> {
    let mut local = vec![None; n_items];
    for (pos, &i) in items.iter().enumerate() {
        let slot = local
            .get_mut(i as usize)
            .ok_or_else(|| Error::InvalidArgument(format!("item {i} out of range (n_items = {n_items})")))?;
        if slot.is_some() {
            return Err(Error::InvalidArgument(format!("item {i} listed twice")));
        }
        *slot = Some(pos as u32);
    }
    Ok(local)
}

/// Binary matrix restricted to a column subset, with local column indices.
#[derive(Debug, Clone)]
pub struct SubMatrix {
    n_rows: usize,
    n_cols: usize,
    row_ptr: Vec<usize>,
    row_cols: Vec<u32>,
    col_ptr: Vec<usize>,
    col_rows: Vec<u32>,
}

impl SubMatrix {
    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.row_cols.len()
    }

    pub fn row(&self, r: usize) -> &[u32] {
        &self.row_cols[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    pub fn col(&self, c: usize) -> &[u32] {
        &self.col_rows[self.col_ptr[c]..self.col_ptr[c + 1]]
    }

    pub fn row_degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn col_degree(&self, c: usize) -> usize {
        self.col_ptr[c + 1] - self.col_ptr[c]
    }

    /// Dense co-occurrence matrix `RᵀR` over the retained columns.
    pub fn gram(&self) -> DMatrix<f64> {
        let p = self.n_cols;
        let mut g = DMatrix::<f64>::zeros(p, p);
        // Column-major storage: each output column is owned by one task.
        g.as_mut_slice().par_chunks_mut(p.max(1)).enumerate().for_each(|(a, col)| {
            for &u in self.col(a) {
                for &b in self.row(u as usize) {
                    col[b as usize] += 1.0;
                }
            }
        });
        g
    }
}

/// `D_U^{-1/2} R D_I^{-1/2}` as a view over an interaction matrix.
#[derive(Debug, Clone)]
pub struct NormalizedView<'a> {
    matrix: &'a InteractionMatrix,
    user_inv_sqrt: Vec<f64>,
    item_inv_sqrt: Vec<f64>,
}

impl<'a> NormalizedView<'a> {
    pub fn new(matrix: &'a InteractionMatrix) -> Result<Self> {
        let inv_sqrt = |degrees: &[f64], axis: &'static str| -> Result<Vec<f64>> {
            degrees
                .iter()
                .enumerate()
                .map(|(index, &d)| {
                    if d > 0.0 {
                        Ok(1.0 / d.sqrt())
                    } else {
                        Err(Error::DegreeZero { axis, index })
                    }
                })
                .collect()
        };
        Ok(Self {
            user_inv_sqrt: inv_sqrt(matrix.user_degrees(), "user")?,
            item_inv_sqrt: inv_sqrt(matrix.item_degrees(), "item")?,
            matrix,
        })
    }

    pub fn matrix(&self) -> &'a InteractionMatrix {
        self.matrix
    }

    pub fn user_inv_sqrt(&self) -> &[f64] {
        &self.user_inv_sqrt
    }

    pub fn item_inv_sqrt(&self) -> &[f64] {
        &self.item_inv_sqrt
    }

    pub fn value(&self, u: usize, i: usize) -> f64 {
        if self.matrix.contains(u, i as u32) {
            self.user_inv_sqrt[u] * self.item_inv_sqrt[i]
        } else {
            0.0
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let m = self.matrix;
        let mut d = DMatrix::zeros(m.n_users(), m.n_items());
        for u in 0..m.n_users() {
            for &i in m.row(u) {
                d[(u, i as usize)] = self.user_inv_sqrt[u] * self.item_inv_sqrt[i as usize];
            }
        }
        d
    }
}

/// Per-partition memory ceiling for dense `p x p` buffers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryBudget(pub usize);

impl MemoryBudget {
    pub const UNLIMITED: MemoryBudget = MemoryBudget(usize::MAX);

    /// Check that `buffers` dense `p x p` f64 matrices fit.
    pub fn check(&self, p: usize, buffers: usize) -> Result<()> {
        let required = p.saturating_mul(p).saturating_mul(buffers).saturating_mul(8);
        if required > self.0 {
            return Err(Error::PartitionTooLarge {
                size: p,
                required_bytes: required,
                budget_bytes: self.0,
            });
        }
        Ok(())
    }
}

impl Default for MemoryBudget {
    fn default() -> Self {
        MemoryBudget(32 << 30)
    }
}

/// Dense `R_nᵀR_n` for the item sublist: entry `(a, b)` counts users who
/// interacted with both `items[a]` and `items[b]`.
pub fn gram(m: &InteractionMatrix, items: &[u32], budget: MemoryBudget) -> Result<DMatrix<f64>> {
    budget.check(items.len(), 1)?;
    Ok(m.restrict(items)?.gram())
}

//! Top-K ranking metrics and the evaluation harness.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{binary_row, rank_scores, SimilarityModel};
use crate::sparse::{IdMap, InteractionMatrix};

/// Users scored per dense batch.
const BATCH: usize = 256;

/// `|top-K ∩ relevant| / |relevant|`, `None` when nothing is relevant.
/// `relevant` is treated as a set.
pub fn recall_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// Binary-gain NDCG with `1/log₂(rank + 1)` discount, normalized by the ideal
/// DCG of `min(K, |relevant|)` hits.
pub fn ndcg_at_k(ranked: &[u32], relevant: &[u32], k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(r, _)| discount(r + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    Some(if ideal > 0.0 { dcg / ideal } else { 0.0 })
}

/// Held-out interactions keyed by internal user id.
///
/// Test items never seen in training are kept as placeholder ids above the
/// item range: they count towards `|relevant|` and can never be hit.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TestSet {
    users: Vec<(u32, Vec<u32>)>,
    skipped_users: usize,
    unknown_items: usize,
}

impl TestSet {
    /// Map external-id records onto training ids.
    pub fn from_records<I, U, T>(records: I, user_ids: &IdMap, item_ids: &IdMap) -> Result<Self>
    where
        I: IntoIterator<Item = (U, T)>,
        U: AsRef<str>,
        T: AsRef<str>,
    {
        let mut per_user: Vec<Vec<u32>> = vec![Vec::new(); user_ids.len()];
        let mut unknown_users = std::collections::HashSet::new();
        let mut unknown_item_ids = IdMap::new();
        let mut any = false;
        for (u, i) in records {
            any = true;
            let Some(u) = user_ids.get(u.as_ref()) else {
                unknown_users.insert(u.as_ref().to_owned());
                continue;
            };
            let i = match item_ids.get(i.as_ref()) {
                Some(i) => i,
                None => u32::MAX - unknown_item_ids.get_or_insert(i.as_ref()),
            };
            per_user[u as usize].push(i);
        }
        if !any {
            return Err(Error::EvalEmpty);
        }
        let mut set = Self::from_internal(per_user.into_iter().enumerate().map(|(u, items)| (u as u32, items)).collect());
        set.skipped_users = unknown_users.len();
        set.unknown_items = set
            .users
            .iter()
            .flat_map(|(_, items)| items.iter())
            .filter(|&&i| i as usize >= item_ids.len())
            .count();
        Ok(set)
    }

    /// From internal ids; users with no items are dropped.
    pub fn from_internal(users: Vec<(u32, Vec<u32>)>) -> Self {
        let users = users
            .into_iter()
            .filter_map(|(u, mut items)| {
                items.sort_unstable();
                items.dedup();
                (!items.is_empty()).then_some((u, items))
            })
            .collect();
        Self {
            users,
            skipped_users: 0,
            unknown_items: 0,
        }
    }

    pub fn users(&self) -> &[(u32, Vec<u32>)] {
        &self.users
    }

    pub fn skipped_users(&self) -> usize {
        self.skipped_users
    }

    pub fn unknown_items(&self) -> usize {
        self.unknown_items
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub recall: f64,
    pub ndcg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub recall_at_k: f64,
    pub ndcg_at_k: f64,
    pub n_users_evaluated: usize,
    pub n_users_skipped: usize,
    pub n_unknown_items: usize,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    /// S in CSR (≈ 2·NNZ) plus V, σ and degree scalings.
    pub n_parameters: usize,
    /// CSR-derived count for S alone (2·NNZ).
    pub n_sparse_parameters: usize,
    pub nnz: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_user: Option<Vec<UserMetrics>>,
}

impl EvalReport {
    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = [
            (format!("Recall@{}", self.k), format!("{:.4}", self.recall_at_k)),
            (format!("NDCG@{}", self.k), format!("{:.4}", self.ndcg_at_k)),
            ("users evaluated".into(), self.n_users_evaluated.to_string()),
            ("users skipped".into(), self.n_users_skipped.to_string()),
            ("unknown test items".into(), self.n_unknown_items.to_string()),
            ("NNZ(S)".into(), self.nnz.to_string()),
            ("parameters (S, CSR)".into(), self.n_sparse_parameters.to_string()),
            ("parameters (total)".into(), self.n_parameters.to_string()),
            ("train seconds".into(), format!("{:.2}", self.train_seconds)),
            ("eval seconds".into(), format!("{:.2}", self.eval_seconds)),
        ];
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        rows.iter().map(|(k, v)| format!("{k:<width$}  {v:>12}\n")).collect()
    }
}

/// Score every test user against the model (training items masked) and
/// average the metrics.
pub fn evaluate(model: &SimilarityModel, train: &InteractionMatrix, test: &TestSet, k: usize, keep_per_user: bool) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::EvalEmpty);
    }
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    if train.n_items() != model.n_items() {
        return Err(Error::ShapeError(format!(
            "training matrix has {} items, model {}",
            train.n_items(),
            model.n_items()
        )));
    }
    if let Some((u, _)) = test.users().iter().find(|(u, _)| *u as usize >= train.n_users()) {
        return Err(Error::ShapeError(format!("test user {u} outside training matrix")));
    }
    let start = Instant::now();
    let per_user: Vec<UserMetrics> = test
        .users()
        .par_chunks(BATCH)
        .map(|chunk| -> Result<Vec<UserMetrics>> {
            let rows: Vec<Vec<(u32, f64)>> = chunk.iter().map(|(u, _)| binary_row(train.row(*u as usize))).collect();
            let refs: Vec<&[(u32, f64)]> = rows.iter().map(Vec::as_slice).collect();
            let scores = model.score_batch(&refs)?;
            let mut out = Vec::with_capacity(chunk.len());
            let mut buf = vec![0.0; model.n_items()];
            for (r, (u, relevant)) in chunk.iter().enumerate() {
                for (j, x) in buf.iter_mut().enumerate() {
                    *x = scores[(r, j)];
                }
                let ranked: Vec<u32> = rank_scores(&buf, &rows[r], k, true).into_iter().map(|e| e.0).collect();
                out.push(UserMetrics {
                    user: *u,
                    recall: recall_at_k(&ranked, relevant, k).expect("test users have items"),
                    ndcg: ndcg_at_k(&ranked, relevant, k).expect("test users have items"),
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let n = per_user.len();
    Ok(EvalReport {
        k,
        recall_at_k: per_user.iter().map(|m| m.recall).sum::<f64>() / n as f64,
        ndcg_at_k: per_user.iter().map(|m| m.ndcg).sum::<f64>() / n as f64,
        n_users_evaluated: n,
        n_users_skipped: test.skipped_users(),
        n_unknown_items: test.unknown_items(),
        train_seconds: 0.0,
        eval_seconds: start.elapsed().as_secs_f64(),
        n_parameters: model.n_parameters(),
        n_sparse_parameters: model.n_sparse_parameters(),
        nnz: model.s().nnz(),
        per_user: keep_per_user.then_some(per_user),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &[1, 3], 2), Some(0.5));
        assert_eq!(recall_at_k(&[1, 2, 3], &[2, 1], 2), Some(1.0));
        assert_eq!(recall_at_k(&[1, 2, 3], &[7], 3), Some(0.0));
        assert_eq!(recall_at_k(&[1, 2, 3], &[], 3), None);
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[4, 5], &[4, 5], 2), Some(1.0));
        let v = ndcg_at_k(&[9, 4], &[4], 2).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[1, 2], &[3], 2), Some(0.0));
        assert_eq!(ndcg_at_k(&[1], &[], 1), None);
    }

    #[test]
    fn ndcg_ideal_truncates_at_k() {
        // Three relevant items, K = 2, both top slots hit: perfect.
        assert_eq!(ndcg_at_k(&[1, 2, 9], &[1, 2, 3], 2), Some(1.0));
    }

    #[test]
    fn unknown_items_count_as_misses() {
        let users = IdMap::from_ids(vec!["u".into()]).unwrap();
        let items = IdMap::from_ids(vec!["a".into(), "b".into()]).unwrap();
        let set = TestSet::from_records([("u", "a"), ("u", "zzz"), ("ghost", "a")], &users, &items).unwrap();
        assert_eq!(set.skipped_users(), 1);
        assert_eq!(set.unknown_items(), 1);
        let (_, rel) = &set.users()[0];
        assert_eq!(rel.len(), 2);
        assert_eq!(recall_at_k(&[0, 1], rel, 2), Some(0.5));
    }

    #[test]
    fn empty_test_records() {
        let ids = IdMap::new();
        let none: [(&str, &str); 0] = [];
        assert!(matches!(TestSet::from_records(none, &ids, &ids), Err(Error::EvalEmpty)));
    }
}

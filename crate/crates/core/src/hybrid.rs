//! Weighted-average fusion of min-max normalised BM25 and dense scores.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{Query, RankedList, ScoredDoc};
use crate::dense::{DenseIndex, QueryVector};
use crate::error::{Error, Result};
use crate::sparse::SparseIndex;

const DEFAULT_MIN_POOL: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weight on the sparse leg.
    pub alpha: f64,
    /// Candidates taken from each leg; `None` means `max(k, 100)`.
    pub pool_depth: Option<usize>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            pool_depth: None,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.pool_depth == Some(0) {
            return Err(Error::InvalidConfig("pool_depth must be at least 1".into()));
        }
        Ok(())
    }

    pub fn pool_for(&self, k: usize) -> usize {
        self.pool_depth.unwrap_or_else(|| k.max(DEFAULT_MIN_POOL))
    }
}

/// Min-max normalisation. A list whose scores are all equal maps to 1.0.
pub fn normalize_scores(list: &RankedList) -> RankedList {
    let (lo, hi) = list
        .entries
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
            (lo.min(e.score), hi.max(e.score))
        });
    let range = hi - lo;
    RankedList {
        query_id: list.query_id.clone(),
        entries: list
            .entries
            .iter()
            .map(|e| ScoredDoc {
                doc_id: e.doc_id.clone(),
                score: if range > 0.0 { (e.score - lo) / range } else { 1.0 },
            })
            .collect(),
    }
}

/// Fuses two already-retrieved legs. A document missing from one leg scores
/// 0 on that leg.
pub fn fuse(sparse: &RankedList, dense: &RankedList, alpha: f64, k: usize) -> RankedList {
    let mut legs: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let sparse_norm = normalize_scores(sparse);
    let dense_norm = normalize_scores(dense);
    for e in &sparse_norm.entries {
        legs.entry(e.doc_id.as_str()).or_default().0 = e.score;
    }
    for e in &dense_norm.entries {
        legs.entry(e.doc_id.as_str()).or_default().1 = e.score;
    }
    let scores = legs
        .into_iter()
        .map(|(id, (s, d))| (id.to_owned(), alpha * s + (1.0 - alpha) * d))
        .collect();
    RankedList::from_scores(sparse.query_id.clone(), scores, k)
}

pub fn hybrid_search(
    sparse: &SparseIndex,
    dense: &DenseIndex,
    query: &Query,
    query_vec: &QueryVector,
    k: usize,
    config: &FusionConfig,
) -> Result<RankedList> {
    config.validate()?;
    let pool = config.pool_for(k);
    let sparse_leg = sparse.search(&query.query_id, &query.text, pool);
    let dense_leg = dense.search(&query.query_id, query_vec, pool)?;
    Ok(fuse(&sparse_leg, &dense_leg, config.alpha, k))
}

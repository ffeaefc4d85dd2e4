//! Query-expansion baselines: average query expansion (AQE) and its
//! similarity-weighted variant (alpha-QE).
//!
//! Both replace the query by a weighted mean of itself and its top
//! `n_expand` stage-1 results, then re-rank the whole gallery against the
//! expanded query. The query always carries weight 1; AQE gives every
//! neighbor weight 1 and alpha-QE gives neighbor `i` weight
//! `max(sim_i, 0)^qe_alpha`.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::distance::{cosine_distance_any, dot};
use crate::error::{Error, Result};
use crate::pipeline::RankedList;

pub const DEFAULT_N_EXPAND: usize = 10;
pub const DEFAULT_QE_ALPHA: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QeParams {
    pub n_expand: usize,
    pub qe_alpha: f64,
}

impl Default for QeParams {
    fn default() -> Self {
        Self {
            n_expand: DEFAULT_N_EXPAND,
            qe_alpha: DEFAULT_QE_ALPHA,
        }
    }
}

impl QeParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_expand == 0 {
            return Err(Error::param("n_expand must be >= 1"));
        }
        if !(self.qe_alpha.is_finite() && self.qe_alpha >= 0.0) {
            return Err(Error::param(format!(
                "qe_alpha must be >= 0, got {}",
                self.qe_alpha
            )));
        }
        Ok(())
    }
}

/// `(query + sum w_i g_i) / (1 + sum w_i)`.
pub fn expand_query(query: &[f32], neighbors: &[&[f32]], weights: &[f64]) -> Vec<f32> {
    let mut acc: Vec<f64> = query.iter().map(|&v| v as f64).collect();
    let mut total = 1.0f64;
    for (n, &w) in neighbors.iter().zip(weights) {
        total += w;
        for (a, &v) in acc.iter_mut().zip(n.iter()) {
            *a += w * v as f64;
        }
    }
    acc.into_iter().map(|v| (v / total) as f32).collect()
}

/// Neighbor weights for alpha-QE; negative similarities clamp to zero.
pub fn alpha_qe_weights(query: &[f32], neighbors: &[&[f32]], qe_alpha: f64) -> Vec<f64> {
    neighbors
        .iter()
        .map(|n| (dot(query, n) as f64).max(0.0).powf(qe_alpha))
        .collect()
}

fn top_rows<'d>(stage1: &RankedList, dataset: &'d Dataset, n: usize) -> Vec<&'d [f32]> {
    stage1
        .rows()
        .take(n)
        .map(|r| dataset.gallery_features.row(r))
        .collect()
}

/// Re-ranks every stage-1 entry by distance to `expanded`; ties keep their
/// stage-1 order.
fn rerank_full(stage1: &RankedList, dataset: &Dataset, expanded: &[f32]) -> Result<RankedList> {
    let mut out = stage1.clone();
    for e in out.entries.iter_mut() {
        e.distance = cosine_distance_any(expanded, dataset.gallery_features.row(e.row as usize))?;
    }
    out.entries
        .sort_by(|a, b| a.distance.total_cmp(&b.distance));
    Ok(out)
}

fn check(
    query_row: usize,
    stage1: &RankedList,
    dataset: &Dataset,
    params: &QeParams,
) -> Result<()> {
    params.validate()?;
    if query_row >= dataset.num_queries() {
        return Err(Error::InvalidRow {
            row: query_row,
            rows: dataset.num_queries(),
        });
    }
    if stage1.len() != dataset.num_gallery() {
        return Err(Error::LengthMismatch {
            what: "stage-1 list",
            expected: dataset.num_gallery(),
            found: stage1.len(),
        });
    }
    Ok(())
}

pub fn aqe_rerank(
    query_row: usize,
    stage1: &RankedList,
    dataset: &Dataset,
    params: &QeParams,
) -> Result<RankedList> {
    check(query_row, stage1, dataset, params)?;
    let query = dataset.query_features.row(query_row);
    let neighbors = top_rows(stage1, dataset, params.n_expand);
    let weights = vec![1.0; neighbors.len()];
    rerank_full(stage1, dataset, &expand_query(query, &neighbors, &weights))
}

pub fn alpha_qe_rerank(
    query_row: usize,
    stage1: &RankedList,
    dataset: &Dataset,
    params: &QeParams,
) -> Result<RankedList> {
    check(query_row, stage1, dataset, params)?;
    let query = dataset.query_features.row(query_row);
    let neighbors = top_rows(stage1, dataset, params.n_expand);
    let weights = alpha_qe_weights(query, &neighbors, params.qe_alpha);
    rerank_full(stage1, dataset, &expand_query(query, &neighbors, &weights))
}

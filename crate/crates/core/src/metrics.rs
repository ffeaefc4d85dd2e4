//! CMC and mAP under the cross-camera protocol.
//!
//! For a query, gallery items of the same identity seen by the same camera,
//! and all distractors, are junk: they are removed from the ranking before
//! scoring. The remaining same-identity items are the good set. Queries with
//! an empty good set are skipped.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ItemMeta};
use crate::error::{Error, Result};
use crate::pipeline::{RankedList, RerankResult, StageTiming};

/// Number of CMC ranks reported.
pub const CMC_DEPTH: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub ap: f64,
    /// 1-based rank of the first good item after junk removal.
    pub first_match_rank: usize,
}

fn same_camera(a: &ItemMeta, b: &ItemMeta) -> bool {
    a.has_known_camera() && a.camera_id == b.camera_id
}

fn is_junk(query: &ItemMeta, item: &ItemMeta) -> bool {
    item.is_distractor() || (item.person_id == query.person_id && same_camera(query, item))
}

fn is_good(query: &ItemMeta, item: &ItemMeta) -> bool {
    !query.is_distractor() && item.person_id == query.person_id && !same_camera(query, item)
}

/// Scores one ranking (gallery row indices, best first). `None` when the
/// query has no good items.
pub fn query_eval(
    ranked_rows: impl IntoIterator<Item = usize>,
    query_meta: &ItemMeta,
    gallery_meta: &[ItemMeta],
) -> Option<QueryScore> {
    let total_good = gallery_meta
        .iter()
        .filter(|g| is_good(query_meta, g))
        .count();
    if total_good == 0 {
        return None;
    }
    let mut rank = 0usize;
    let mut found = 0usize;
    let mut precision_sum = 0.0f64;
    let mut first = None;
    for row in ranked_rows {
        let item = &gallery_meta[row];
        if is_junk(query_meta, item) {
            continue;
        }
        rank += 1;
        if is_good(query_meta, item) {
            found += 1;
            precision_sum += found as f64 / rank as f64;
            first.get_or_insert(rank);
            if found == total_good {
                break;
            }
        }
    }
    Some(QueryScore {
        ap: precision_sum / total_good as f64,
        // a ranking that omits every good item never matches
        first_match_rank: first.unwrap_or(usize::MAX),
    })
}

pub fn query_eval_list(
    ranked: &RankedList,
    query_meta: &ItemMeta,
    gallery_meta: &[ItemMeta],
) -> Option<QueryScore> {
    query_eval(ranked.rows(), query_meta, gallery_meta)
}

/// Aggregate timing figures attached to a report.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub wall_ms: f64,
    pub stage1_ms_total: f64,
    pub stage2_ms_total: f64,
    pub mean_query_ms: f64,
    pub mean_stage2_ms: f64,
}

impl TimingSummary {
    pub fn from_results<'r>(
        results: impl IntoIterator<Item = &'r RerankResult>,
        wall_ms: f64,
    ) -> Self {
        Self::from_timings(results.into_iter().map(|r| r.timing), wall_ms)
    }

    pub fn from_timings(timings: impl IntoIterator<Item = StageTiming>, wall_ms: f64) -> Self {
        let mut s = Self {
            wall_ms,
            ..Default::default()
        };
        let mut n = 0usize;
        for t in timings {
            s.stage1_ms_total += t.stage1.as_secs_f64() * 1e3;
            s.stage2_ms_total += t.stage2.as_secs_f64() * 1e3;
            n += 1;
        }
        if n > 0 {
            s.mean_query_ms = (s.stage1_ms_total + s.stage2_ms_total) / n as f64;
            s.mean_stage2_ms = s.stage2_ms_total / n as f64;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
    pub cmc: Vec<f64>,
    pub evaluated: usize,
    pub skipped: usize,
    #[serde(skip)]
    pub per_query_ap: Vec<f64>,
    #[serde(default)]
    pub timing: TimingSummary,
}

impl MetricsReport {
    /// Aggregates per-query outcomes in the given order.
    pub fn from_scores(scores: &[Option<QueryScore>]) -> Self {
        let evaluated: Vec<&QueryScore> = scores.iter().flatten().collect();
        let skipped = scores.len() - evaluated.len();
        let mut cmc = vec![0.0f64; CMC_DEPTH];
        let mut per_query_ap = Vec::with_capacity(evaluated.len());
        for s in &evaluated {
            per_query_ap.push(s.ap);
            if s.first_match_rank <= CMC_DEPTH {
                for c in &mut cmc[s.first_match_rank - 1..] {
                    *c += 1.0;
                }
            }
        }
        let n = evaluated.len();
        let map = if n == 0 {
            0.0
        } else {
            per_query_ap.iter().sum::<f64>() / n as f64
        };
        if n > 0 {
            for c in &mut cmc {
                *c /= n as f64;
            }
        }
        Self {
            rank1: cmc[0],
            rank5: cmc[4],
            rank10: cmc[9],
            map,
            cmc,
            evaluated: n,
            skipped,
            per_query_ap,
            timing: TimingSummary::default(),
        }
    }

    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:-<12} {:->10}", "", "");
        for (name, v) in [
            ("Rank@1", self.rank1),
            ("Rank@5", self.rank5),
            ("Rank@10", self.rank10),
            ("mAP", self.map),
        ] {
            let _ = writeln!(s, "{:<12} {:>9.2}%", name, v * 100.0);
        }
        let _ = writeln!(s, "{:<12} {:>10}", "evaluated", self.evaluated);
        let _ = writeln!(s, "{:<12} {:>10}", "skipped", self.skipped);
        if self.timing.wall_ms > 0.0 {
            let _ = writeln!(
                s,
                "{:<12} {:>8.3}ms",
                "query mean", self.timing.mean_query_ms
            );
            let _ = writeln!(
                s,
                "{:<12} {:>8.3}ms",
                "stage2 mean", self.timing.mean_stage2_ms
            );
        }
        s
    }
}

/// Evaluates the Stage-2 list of every result.
pub fn evaluate(results: &[RerankResult], dataset: &Dataset) -> Result<MetricsReport> {
    let lists: Vec<&RankedList> = results.iter().map(|r| &r.stage2).collect();
    evaluate_lists(&lists, dataset)
}

/// Evaluates one ranked list per query, in query order.
pub fn evaluate_lists(lists: &[&RankedList], dataset: &Dataset) -> Result<MetricsReport> {
    if lists.len() != dataset.query_meta.len() {
        return Err(Error::LengthMismatch {
            what: "ranked lists",
            expected: dataset.query_meta.len(),
            found: lists.len(),
        });
    }
    let scores: Vec<Option<QueryScore>> = lists
        .iter()
        .map(|l| {
            let q = dataset
                .query_meta
                .get(l.query_row)
                .ok_or(Error::InvalidRow {
                    row: l.query_row,
                    rows: dataset.query_meta.len(),
                })?;
            if let Some(&bad) = l
                .entries
                .iter()
                .map(|e| e.row as usize)
                .find(|&r| r >= dataset.gallery_meta.len())
                .as_ref()
            {
                return Err(Error::InvalidRow {
                    row: bad,
                    rows: dataset.gallery_meta.len(),
                });
            }
            Ok(query_eval_list(l, q, &dataset.gallery_meta))
        })
        .collect::<Result<_>>()?;
    Ok(MetricsReport::from_scores(&scores))
}

/// Evaluates raw rankings (rows of gallery indices) against metadata.
pub fn evaluate_rankings(
    rankings: &[Vec<usize>],
    query_meta: &[ItemMeta],
    gallery_meta: &[ItemMeta],
) -> Result<MetricsReport> {
    if rankings.len() != query_meta.len() {
        return Err(Error::LengthMismatch {
            what: "rankings",
            expected: query_meta.len(),
            found: rankings.len(),
        });
    }
    let mut scores = Vec::with_capacity(rankings.len());
    for (ranking, q) in rankings.iter().zip(query_meta) {
        if let Some(&bad) = ranking.iter().find(|&&r| r >= gallery_meta.len()) {
            return Err(Error::InvalidRow {
                row: bad,
                rows: gallery_meta.len(),
            });
        }
        scores.push(query_eval(ranking.iter().copied(), q, gallery_meta));
    }
    Ok(MetricsReport::from_scores(&scores))
}

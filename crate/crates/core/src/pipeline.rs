//! Stage 1 (cosine ranking over the whole gallery) and Stage 2 (re-ranking
//! of the top-M candidates against their multi-view features).

use std::io::Write;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{alpha_qe_rerank, aqe_rerank, QeParams};
use crate::dataset::Dataset;
use crate::distance::cosine_distance_any_f64;
use crate::error::{Error, Result};
use crate::index::{IndexParams, NeighborIndex};
use crate::kwf::{blend, multi_view_features, FusedFeature, FusionCache, KwfParams};

/// One ranked gallery row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub row: u32,
    pub distance: f32,
}

/// Ordered gallery rows for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_row: usize,
    pub entries: Vec<RankEntry>,
}

impl RankedList {
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.row as usize)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stable sort of `entries[..keys.len()]` by ascending key; equal keys
    /// keep their prior order.
    fn sort_head_by(&mut self, keys: &[f64]) {
        let head = keys.len();
        let mut order: Vec<usize> = (0..head).collect();
        order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]));
        let sorted: Vec<RankEntry> = order.iter().map(|&i| self.entries[i]).collect();
        self.entries[..head].copy_from_slice(&sorted);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage1: Duration,
    pub stage2: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankResult {
    pub stage1: RankedList,
    pub stage2: RankedList,
    /// Multi-view features computed by this call (cache hits excluded).
    pub fused_count: usize,
    pub timing: StageTiming,
}

/// Which second stage to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Kwf,
    Aqe,
    #[serde(rename = "alphaqe")]
    AlphaQe,
    /// Stage 1 only; Stage 2 is a copy.
    None,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kwf" => Ok(Method::Kwf),
            "aqe" => Ok(Method::Aqe),
            "alphaqe" | "alpha_qe" => Ok(Method::AlphaQe),
            "none" => Ok(Method::None),
            other => Err(Error::param(format!("unknown method {other:?}"))),
        }
    }
}

fn check_query(query_row: usize, dataset: &Dataset) -> Result<()> {
    if query_row >= dataset.num_queries() {
        return Err(Error::InvalidRow {
            row: query_row,
            rows: dataset.num_queries(),
        });
    }
    Ok(())
}

/// Orders the full gallery by distance to the query feature.
pub fn initial_rank(
    query_row: usize,
    dataset: &Dataset,
    index: &NeighborIndex<'_>,
) -> Result<RankedList> {
    check_query(query_row, dataset)?;
    let hits = index.rank_all(dataset.query_features.row(query_row))?;
    Ok(RankedList {
        query_row,
        entries: hits
            .into_iter()
            .map(|h| RankEntry {
                row: h.row as u32,
                distance: h.distance as f32,
            })
            .collect(),
    })
}

/// Re-ranks the top `min(M, N)` entries of `stage1` by cosine distance between
/// the query and each entry's blended multi-view feature. The tail is left
/// untouched. Passing a cache lets fused features be shared across queries.
pub fn rerank(
    query_row: usize,
    stage1: &RankedList,
    dataset: &Dataset,
    index: &NeighborIndex<'_>,
    params: &KwfParams,
    cache: Option<&FusionCache>,
) -> Result<RerankResult> {
    params.validate()?;
    check_query(query_row, dataset)?;
    if stage1.len() != dataset.num_gallery() {
        return Err(Error::LengthMismatch {
            what: "stage-1 list",
            expected: dataset.num_gallery(),
            found: stage1.len(),
        });
    }
    let start = Instant::now();
    let head = params.m.min(stage1.len());
    let mut stage2 = stage1.clone();
    let mut fused_count = 0;

    // alpha = 0 leaves every head feature unchanged; keep the stage-1 scores.
    if params.alpha > 0.0 && head > 1 {
        let query = dataset.query_features.row(query_row);
        let query_cam = dataset.query_meta[query_row].camera_id;
        let anchors: Vec<usize> = stage1.entries[..head]
            .iter()
            .map(|e| e.row as usize)
            .collect();

        let mut features: Vec<Option<Arc<FusedFeature>>> = anchors
            .iter()
            .map(|&a| cache.and_then(|c| c.get(a, query_cam)))
            .collect();
        let missing: Vec<usize> = anchors
            .iter()
            .zip(&features)
            .filter(|(_, f)| f.is_none())
            .map(|(&a, _)| a)
            .collect();
        if !missing.is_empty() {
            let fresh =
                multi_view_features(&missing, query_cam, index, &dataset.gallery_meta, params)?;
            fused_count = fresh.len();
            let mut fresh = missing.iter().zip(fresh.into_iter().map(Arc::new));
            for (slot, anchor) in features.iter_mut().zip(&anchors) {
                if slot.is_none() {
                    let (a, f) = fresh.next().expect("one fresh feature per miss");
                    debug_assert_eq!(a, anchor);
                    if let Some(c) = cache {
                        c.insert(*a, query_cam, Arc::clone(&f));
                    }
                    *slot = Some(f);
                }
            }
        }

        let gallery = &dataset.gallery_features;
        let mut keys = Vec::with_capacity(head);
        for (entry, feature) in stage2.entries[..head].iter_mut().zip(&features) {
            let feature = feature.as_ref().expect("filled above");
            let blended = blend(gallery.row(entry.row as usize), feature, params.alpha)?;
            let key = cosine_distance_any_f64(query, &blended)?;
            entry.distance = key as f32;
            keys.push(key);
        }
        stage2.sort_head_by(&keys);
    }

    Ok(RerankResult {
        stage1: stage1.clone(),
        stage2,
        fused_count,
        timing: StageTiming {
            stage1: Duration::ZERO,
            stage2: start.elapsed(),
        },
    })
}

/// Full two-stage engine over one dataset and index.
pub struct Pipeline<'a> {
    dataset: &'a Dataset,
    index: NeighborIndex<'a>,
    method: Method,
    params: KwfParams,
    qe: QeParams,
    cache: FusionCache,
}

impl<'a> Pipeline<'a> {
    /// Builds the index described by `index_params` over the gallery.
    pub fn new(
        dataset: &'a Dataset,
        index_params: &IndexParams,
        params: KwfParams,
    ) -> Result<Self> {
        let index = NeighborIndex::build(&dataset.gallery_features, index_params)?;
        Self::with_index(dataset, index, params)
    }

    pub fn with_index(
        dataset: &'a Dataset,
        index: NeighborIndex<'a>,
        params: KwfParams,
    ) -> Result<Self> {
        params.validate()?;
        if !std::ptr::eq(index.gallery(), &dataset.gallery_features)
            && index.gallery() != &dataset.gallery_features
        {
            return Err(Error::param(
                "index was not built over this dataset's gallery",
            ));
        }
        Ok(Self {
            dataset,
            index,
            method: Method::Kwf,
            params,
            qe: QeParams::default(),
            cache: FusionCache::new(),
        })
    }

    pub fn with_method(mut self, method: Method, qe: QeParams) -> Result<Self> {
        qe.validate()?;
        self.method = method;
        self.qe = qe;
        Ok(self)
    }

    pub fn index(&self) -> &NeighborIndex<'a> {
        &self.index
    }

    pub fn params(&self) -> &KwfParams {
        &self.params
    }

    pub fn cache(&self) -> &FusionCache {
        &self.cache
    }

    pub fn run_query(&self, query_row: usize) -> Result<RerankResult> {
        let t0 = Instant::now();
        let stage1 = initial_rank(query_row, self.dataset, &self.index)?;
        let stage1_time = t0.elapsed();
        let mut result = match self.method {
            Method::Kwf => rerank(
                query_row,
                &stage1,
                self.dataset,
                &self.index,
                &self.params,
                Some(&self.cache),
            )?,
            Method::None => RerankResult {
                stage2: stage1.clone(),
                stage1,
                fused_count: 0,
                timing: StageTiming::default(),
            },
            Method::Aqe | Method::AlphaQe => {
                let t1 = Instant::now();
                let stage2 = if self.method == Method::Aqe {
                    aqe_rerank(query_row, &stage1, self.dataset, &self.qe)?
                } else {
                    alpha_qe_rerank(query_row, &stage1, self.dataset, &self.qe)?
                };
                RerankResult {
                    stage1,
                    stage2,
                    fused_count: 0,
                    timing: StageTiming {
                        stage1: Duration::ZERO,
                        stage2: t1.elapsed(),
                    },
                }
            }
        };
        result.timing.stage1 = stage1_time;
        Ok(result)
    }

    /// Processes every query on the current rayon pool and hands each result
    /// to `f`; the mapped values come back in query order.
    pub fn run_each<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(RerankResult) -> T + Sync,
    {
        (0..self.dataset.num_queries())
            .into_par_iter()
            .map(|q| self.run_query(q).map(&f))
            .collect()
    }

    pub fn run_all(&self) -> Result<Vec<RerankResult>> {
        self.run_each(|r| r)
    }
}

/// One result per query, in query order.
pub fn run_all(
    dataset: &Dataset,
    params: &KwfParams,
    index_params: &IndexParams,
) -> Result<Vec<RerankResult>> {
    Pipeline::new(dataset, index_params, *params)?.run_all()
}

/// A JSON Lines record: query id plus gallery ids of both stages, truncated
/// to `depth` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub query_id: String,
    pub stage1: Vec<String>,
    pub stage2: Vec<String>,
}

impl DumpRecord {
    pub fn new(result: &RerankResult, dataset: &Dataset, depth: usize) -> Self {
        let ids = |list: &RankedList| {
            list.rows()
                .take(depth)
                .map(|r| dataset.gallery_meta[r].image_id.clone())
                .collect()
        };
        Self {
            query_id: dataset.query_meta[result.stage1.query_row].image_id.clone(),
            stage1: ids(&result.stage1),
            stage2: ids(&result.stage2),
        }
    }
}

pub fn write_dump<W: Write>(mut w: W, records: &[DumpRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io("<dump>", e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io("<dump>", e))?;
    }
    w.flush().map_err(|e| Error::io("<dump>", e))
}

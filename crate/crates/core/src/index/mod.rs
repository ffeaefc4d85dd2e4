//! Top-k neighbor retrieval over the gallery.
//!
//! Three backends share one contract: hits are unique rows sorted ascending by
//! distance with ties broken by ascending row, and the exclusion predicate is
//! applied to the candidate stream before truncation to `k`.

mod flat;
mod ivf;
mod lsh;
mod persist;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureMatrix;
use crate::distance::{distance_from_dot_f64, dot_error_bound, dot_f64};
use crate::error::{Error, Result};

pub use flat::FlatIndex;
pub use ivf::{IvfIndex, DEFAULT_KMEANS_ITERS};
pub use lsh::{hamming, LshIndex};
pub use persist::{load_index, read_index, save_index, write_index, INDEX_MAGIC};

pub const DEFAULT_NPROBE: usize = 8;
pub const DEFAULT_LSH_BITS: usize = 512;

/// Exclusion predicate over `(query slot, gallery row)`. The query slot is the
/// position of the query within a batch (always 0 for single-query calls).
pub type ExcludeFn<'f> = &'f (dyn Fn(usize, usize) -> bool + Sync);

/// One retrieved gallery row. Exact backends report `1 - dot` accumulated in
/// `f64`; LSH reports its angular proxy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborHit {
    pub row: usize,
    pub distance: f64,
}

/// Which index structure to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Flat,
    #[serde(rename = "ivfflat")]
    IvfFlat,
    Lsh,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Backend::Flat),
            "ivfflat" | "ivf_flat" | "ivf" => Ok(Backend::IvfFlat),
            "lsh" => Ok(Backend::Lsh),
            other => Err(Error::param(format!("unknown index backend {other:?}"))),
        }
    }
}

/// Build parameters for every backend. Fields irrelevant to the chosen
/// backend are ignored. `None` selects the documented default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexParams {
    pub backend: Backend,
    pub nlist: Option<usize>,
    pub nprobe: usize,
    pub bits: usize,
    pub seed: u64,
}

impl Default for IndexParams {
    fn default() -> Self {
        Self {
            backend: Backend::Flat,
            nlist: None,
            nprobe: DEFAULT_NPROBE,
            bits: DEFAULT_LSH_BITS,
            seed: 0,
        }
    }
}

/// `round(sqrt(n))` clamped to `[1, n]`.
pub fn default_nlist(n: usize) -> usize {
    ((n as f64).sqrt().round() as usize).clamp(1, n.max(1))
}

/// An immutable neighbor index over a borrowed gallery.
#[derive(Debug, Clone)]
pub enum NeighborIndex<'g> {
    Flat(FlatIndex<'g>),
    IvfFlat(IvfIndex<'g>),
    Lsh(LshIndex<'g>),
}

impl<'g> NeighborIndex<'g> {
    pub fn build(gallery: &'g FeatureMatrix, params: &IndexParams) -> Result<Self> {
        Ok(match params.backend {
            Backend::Flat => NeighborIndex::Flat(FlatIndex::build(gallery)?),
            Backend::IvfFlat => {
                let nlist = params
                    .nlist
                    .unwrap_or_else(|| default_nlist(gallery.rows()));
                NeighborIndex::IvfFlat(
                    IvfIndex::build(gallery, nlist, params.seed)?.with_nprobe(params.nprobe)?,
                )
            }
            Backend::Lsh => NeighborIndex::Lsh(LshIndex::build(gallery, params.bits, params.seed)?),
        })
    }

    pub fn backend(&self) -> Backend {
        match self {
            NeighborIndex::Flat(_) => Backend::Flat,
            NeighborIndex::IvfFlat(_) => Backend::IvfFlat,
            NeighborIndex::Lsh(_) => Backend::Lsh,
        }
    }

    pub fn gallery(&self) -> &'g FeatureMatrix {
        match self {
            NeighborIndex::Flat(i) => i.gallery(),
            NeighborIndex::IvfFlat(i) => i.gallery(),
            NeighborIndex::Lsh(i) => i.gallery(),
        }
    }

    fn check_dim(&self, query: &[f32]) -> Result<()> {
        let dim = self.gallery().dim();
        if query.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: query.len(),
            });
        }
        Ok(())
    }

    /// Up to `k` nearest rows not rejected by `exclude`.
    pub fn knn(
        &self,
        query: &[f32],
        k: usize,
        exclude: impl Fn(usize) -> bool + Sync,
    ) -> Result<Vec<NeighborHit>> {
        let f = move |_: usize, row: usize| exclude(row);
        Ok(self.knn_batch(&[query], k, &f)?.pop().unwrap_or_default())
    }

    /// Runs [`knn`](Self::knn) for several queries at once. Results are
    /// identical to issuing the queries one by one.
    pub fn knn_batch(
        &self,
        queries: &[&[f32]],
        k: usize,
        exclude: ExcludeFn<'_>,
    ) -> Result<Vec<Vec<NeighborHit>>> {
        for q in queries {
            self.check_dim(q)?;
        }
        if k == 0 {
            return Ok(vec![Vec::new(); queries.len()]);
        }
        Ok(match self {
            NeighborIndex::Flat(i) => i.knn_batch(queries, k, exclude),
            NeighborIndex::IvfFlat(i) => queries
                .iter()
                .enumerate()
                .map(|(slot, q)| i.knn(q, k, &|row| exclude(slot, row)))
                .collect(),
            NeighborIndex::Lsh(i) => queries
                .iter()
                .enumerate()
                .map(|(slot, q)| i.knn(q, k, &|row| exclude(slot, row)))
                .collect(),
        })
    }

    /// Orders every gallery row for `query`. Flat gives the exact cosine
    /// order; IVF ranks probed rows exactly and places unprobed rows at the
    /// maximum distance 2; LSH orders all rows by Hamming distance.
    pub fn rank_all(&self, query: &[f32]) -> Result<Vec<NeighborHit>> {
        self.check_dim(query)?;
        Ok(match self {
            NeighborIndex::Flat(i) => i.rank_all(query),
            NeighborIndex::IvfFlat(i) => i.rank_all(query),
            NeighborIndex::Lsh(i) => i.rank_all(query),
        })
    }
}

/// Heap entry ordered by `(distance, row)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Candidate {
    pub dist: f32,
    pub row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist
            .total_cmp(&other.dist)
            .then(self.row.cmp(&other.row))
    }
}

/// Bounded max-heap keeping the `k` smallest candidates.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    /// True if a candidate at `dist`/`row` would currently be kept.
    #[inline]
    pub fn admits(&self, dist: f32, row: usize) -> bool {
        self.heap.len() < self.k
            || Candidate { dist, row } < *self.heap.peek().expect("heap is full")
    }

    #[inline]
    pub fn push(&mut self, dist: f32, row: usize) {
        let c = Candidate { dist, row };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if c < *top {
                *top = c;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    /// Largest kept distance once the heap is full.
    pub fn worst(&self) -> Option<f32> {
        (self.heap.len() == self.k)
            .then(|| self.heap.peek().map(|c| c.dist))
            .flatten()
    }

    pub fn into_sorted(self) -> Vec<Candidate> {
        self.heap.into_sorted_vec()
    }
}

pub(crate) fn sort_hits(hits: &mut [NeighborHit]) {
    // (distance, row) keys are unique, so an unstable sort is deterministic
    hits.sort_unstable_by(|a, b| a.distance.total_cmp(&b.distance).then(a.row.cmp(&b.row)));
}

/// Exact distance used for every ordering decision of the exact backends.
#[inline]
pub(crate) fn exact_distance(query: &[f32], row: &[f32]) -> f64 {
    distance_from_dot_f64(dot_f64(query, row))
}

/// Selects the `k` nearest rows under [`exact_distance`] while scanning with
/// fast `f32` distances. Any row whose `f32` distance is within `slack` of the
/// running k-th best is shortlisted and rescored at the end, so `f32`
/// rounding can never change which rows are returned.
pub(crate) struct Shortlist {
    k: usize,
    slack: f32,
    heap: TopK,
    near: Vec<Candidate>,
    cap: usize,
}

impl Shortlist {
    pub fn new(k: usize, query: &[f32]) -> Self {
        let norm = dot_f64(query, query).sqrt() * (1.0 + 1e-5);
        let slack = (2.0 * dot_error_bound(query.len(), norm)) as f32 + 4.0 * f32::EPSILON;
        Self {
            k,
            slack,
            heap: TopK::new(k),
            near: Vec::with_capacity(4 * k + 16),
            cap: 8 * k + 64,
        }
    }

    fn threshold(&self) -> f32 {
        self.heap.worst().map_or(f32::INFINITY, |w| w + self.slack)
    }

    /// True if a row at `dist` still has to be looked at.
    #[inline]
    pub fn wants(&self, dist: f32) -> bool {
        self.heap.len() < self.k || dist <= self.threshold()
    }

    #[inline]
    pub fn push(&mut self, dist: f32, row: usize) {
        self.heap.push(dist, row);
        self.near.push(Candidate { dist, row });
        if self.near.len() > self.cap {
            let t = self.threshold();
            self.near.retain(|c| c.dist <= t);
            // many near-ties: grow instead of pruning on every push
            if self.near.len() > self.cap / 2 {
                self.cap *= 2;
            }
        }
    }

    pub fn finish(self, exact: impl Fn(usize) -> f64) -> Vec<NeighborHit> {
        let t = self.threshold();
        let mut hits: Vec<NeighborHit> = self
            .near
            .iter()
            .filter(|c| c.dist <= t)
            .map(|c| NeighborHit {
                row: c.row,
                distance: exact(c.row),
            })
            .collect();
        sort_hits(&mut hits);
        hits.truncate(self.k);
        hits
    }
}

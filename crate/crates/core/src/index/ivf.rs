use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{exact_distance, sort_hits, NeighborHit, Shortlist, DEFAULT_NPROBE};
use crate::dataset::FeatureMatrix;
use crate::distance::{distance_from_dot, dot, dot4};
use crate::error::{Error, Result};

/// Distance reported for rows in partitions that were not probed.
const UNPROBED_DISTANCE: f64 = 2.0;

pub const DEFAULT_KMEANS_ITERS: usize = 20;

/// Inverted-file index with a spherical k-means coarse quantizer and exact
/// distances inside each list.
#[derive(Debug, Clone)]
pub struct IvfIndex<'g> {
    gallery: &'g FeatureMatrix,
    /// `nlist x dim`, unit-norm rows.
    centroids: Vec<f32>,
    lists: Vec<Vec<u32>>,
    nprobe: usize,
    seed: u64,
}

impl<'g> IvfIndex<'g> {
    pub fn build(gallery: &'g FeatureMatrix, nlist: usize, seed: u64) -> Result<Self> {
        let n = gallery.rows();
        if nlist == 0 || nlist > n {
            return Err(Error::param(format!(
                "nlist must be in [1, {n}], got {nlist}"
            )));
        }
        let centroids = train_centroids(gallery, nlist, seed, DEFAULT_KMEANS_ITERS);
        let assignment = assign(gallery, &centroids, nlist);
        let mut lists = vec![Vec::new(); nlist];
        for (row, &c) in assignment.iter().enumerate() {
            lists[c].push(row as u32);
        }
        Ok(Self {
            gallery,
            centroids,
            lists,
            nprobe: DEFAULT_NPROBE,
            seed,
        })
    }

    pub(crate) fn from_parts(
        gallery: &'g FeatureMatrix,
        centroids: Vec<f32>,
        lists: Vec<Vec<u32>>,
        nprobe: usize,
        seed: u64,
    ) -> Result<Self> {
        let dim = gallery.dim();
        if lists.is_empty() || centroids.len() != lists.len() * dim {
            return Err(Error::IndexFormat("centroid/list count mismatch".into()));
        }
        let mut seen = vec![false; gallery.rows()];
        for &r in lists.iter().flatten() {
            let r = r as usize;
            if r >= seen.len() || seen[r] {
                return Err(Error::IndexFormat(
                    "inverted lists are not a partition".into(),
                ));
            }
            seen[r] = true;
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::IndexFormat(
                "inverted lists do not cover the gallery".into(),
            ));
        }
        Self {
            gallery,
            centroids,
            lists,
            nprobe: DEFAULT_NPROBE,
            seed,
        }
        .with_nprobe(nprobe)
    }

    /// Sets how many lists a query visits. Values above `nlist` probe all.
    pub fn with_nprobe(mut self, nprobe: usize) -> Result<Self> {
        if nprobe == 0 {
            return Err(Error::param("nprobe must be >= 1"));
        }
        self.nprobe = nprobe;
        Ok(self)
    }

    pub fn gallery(&self) -> &'g FeatureMatrix {
        self.gallery
    }

    pub fn nlist(&self) -> usize {
        self.lists.len()
    }

    pub fn nprobe(&self) -> usize {
        self.nprobe
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lists(&self) -> &[Vec<u32>] {
        &self.lists
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    fn centroid(&self, c: usize) -> &[f32] {
        let dim = self.gallery.dim();
        &self.centroids[c * dim..(c + 1) * dim]
    }

    /// List ids in probe order, nearest centroid first, ties by list id.
    fn probe_order(&self, query: &[f32]) -> Vec<usize> {
        let mut order: Vec<(f32, usize)> = (0..self.nlist())
            .map(|c| (distance_from_dot(dot(query, self.centroid(c))), c))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        order.into_iter().map(|(_, c)| c).collect()
    }

    pub(crate) fn knn(
        &self,
        query: &[f32],
        k: usize,
        exclude: &dyn Fn(usize) -> bool,
    ) -> Vec<NeighborHit> {
        let probes = self.probe_order(query);
        let mut heap = Shortlist::new(k, query);
        for &c in probes.iter().take(self.nprobe) {
            let list = &self.lists[c];
            let mut chunks = list.chunks_exact(4);
            for quad in &mut chunks {
                let rows = [0, 1, 2, 3].map(|j| self.gallery.row(quad[j] as usize));
                for (&r, d) in quad.iter().zip(dot4(rows, query)) {
                    let dist = distance_from_dot(d);
                    if heap.wants(dist) && !exclude(r as usize) {
                        heap.push(dist, r as usize);
                    }
                }
            }
            for &r in chunks.remainder() {
                let r = r as usize;
                let dist = distance_from_dot(dot(query, self.gallery.row(r)));
                if heap.wants(dist) && !exclude(r) {
                    heap.push(dist, r);
                }
            }
        }
        heap.finish(|r| exact_distance(query, self.gallery.row(r)))
    }

    pub(crate) fn rank_all(&self, query: &[f32]) -> Vec<NeighborHit> {
        let probes = self.probe_order(query);
        let mut probed = vec![false; self.gallery.rows()];
        let mut hits = Vec::with_capacity(self.gallery.rows());
        for &c in probes.iter().take(self.nprobe) {
            for &r in &self.lists[c] {
                let r = r as usize;
                probed[r] = true;
                hits.push(NeighborHit {
                    row: r,
                    distance: exact_distance(query, self.gallery.row(r)),
                });
            }
        }
        sort_hits(&mut hits);
        // unprobed rows all sit at the maximum distance, already in row order;
        // only probed rows at exactly that distance need merging with them
        let split = hits.partition_point(|h| h.distance < UNPROBED_DISTANCE);
        let mut tail: Vec<NeighborHit> = hits.split_off(split);
        let needs_merge = !tail.is_empty();
        tail.extend(
            probed
                .iter()
                .enumerate()
                .filter(|(_, &p)| !p)
                .map(|(row, _)| NeighborHit {
                    row,
                    distance: UNPROBED_DISTANCE,
                }),
        );
        if needs_merge {
            sort_hits(&mut tail);
        }
        hits.append(&mut tail);
        hits
    }
}

fn nearest_centroid(row: &[f32], centroids: &[f32], nlist: usize) -> usize {
    let dim = row.len();
    let mut best = (f32::INFINITY, 0usize);
    for c in 0..nlist {
        let d = distance_from_dot(dot(row, &centroids[c * dim..(c + 1) * dim]));
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}

fn assign(gallery: &FeatureMatrix, centroids: &[f32], nlist: usize) -> Vec<usize> {
    (0..gallery.rows())
        .into_par_iter()
        .map(|r| nearest_centroid(gallery.row(r), centroids, nlist))
        .collect()
}

/// k-means++ seeding followed by Lloyd iterations with re-normalized
/// centroids. Empty clusters keep their previous centroid.
fn train_centroids(gallery: &FeatureMatrix, nlist: usize, seed: u64, iters: usize) -> Vec<f32> {
    let n = gallery.rows();
    let dim = gallery.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut chosen = Vec::with_capacity(nlist);
    let mut is_chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen.push(first);
    is_chosen[first] = true;
    let mut min_d: Vec<f64> = (0..n)
        .map(|r| distance_from_dot(dot(gallery.row(r), gallery.row(first))) as f64)
        .collect();
    while chosen.len() < nlist {
        let weights: Vec<f64> = min_d
            .iter()
            .zip(&is_chosen)
            .map(|(&d, &c)| if c { 0.0 } else { d * d })
            .collect();
        let total: f64 = weights.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if target < w {
                        break;
                    }
                    target -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            // remaining rows duplicate chosen ones
            is_chosen.iter().position(|&c| !c).expect("nlist <= rows")
        };
        chosen.push(next);
        is_chosen[next] = true;
        for (r, d) in min_d.iter_mut().enumerate() {
            let nd = distance_from_dot(dot(gallery.row(r), gallery.row(next))) as f64;
            if nd < *d {
                *d = nd;
            }
        }
    }

    let mut centroids: Vec<f32> = chosen
        .iter()
        .flat_map(|&r| gallery.row(r).iter().copied())
        .collect();

    for _ in 0..iters {
        let assignment = assign(gallery, &centroids, nlist);
        let mut sums = vec![0.0f64; nlist * dim];
        let mut counts = vec![0usize; nlist];
        for (r, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(gallery.row(r)) {
                *s += v as f64;
            }
        }
        for c in 0..nlist {
            if counts[c] == 0 {
                continue;
            }
            let s = &sums[c * dim..(c + 1) * dim];
            let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for (dst, v) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(s) {
                    *dst = (v / norm) as f32;
                }
            }
        }
    }
    centroids
}

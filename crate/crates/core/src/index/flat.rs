use super::{exact_distance, sort_hits, ExcludeFn, NeighborHit, Shortlist};
use crate::dataset::FeatureMatrix;
use crate::distance::{distance_from_dot, dot, dot4, dot4x4};
use crate::error::{Error, Result};

/// Gallery rows scanned per tile in batched search; sized so a tile of
/// 512-d rows stays resident in L2.
const TILE_ROWS: usize = 128;

/// Exhaustive exact search.
#[derive(Debug, Clone)]
pub struct FlatIndex<'g> {
    gallery: &'g FeatureMatrix,
}

impl<'g> FlatIndex<'g> {
    pub fn build(gallery: &'g FeatureMatrix) -> Result<Self> {
        if gallery.rows() == 0 {
            return Err(Error::EmptyMatrix {
                rows: 0,
                dim: gallery.dim(),
            });
        }
        Ok(Self { gallery })
    }

    pub fn gallery(&self) -> &'g FeatureMatrix {
        self.gallery
    }

    pub(crate) fn knn_batch(
        &self,
        queries: &[&[f32]],
        k: usize,
        exclude: ExcludeFn<'_>,
    ) -> Vec<Vec<NeighborHit>> {
        let mut heaps: Vec<Shortlist> = queries.iter().map(|q| Shortlist::new(k, q)).collect();
        let n = self.gallery.rows();
        let groups = queries.len() / 4;
        let mut start = 0;
        while start < n {
            let end = (start + TILE_ROWS).min(n);
            for g in 0..groups {
                let base = g * 4;
                let rows = [
                    queries[base],
                    queries[base + 1],
                    queries[base + 2],
                    queries[base + 3],
                ];
                let g = &self.gallery;
                let mut r = start;
                while r + 4 <= end {
                    let dots = dot4x4(rows, [g.row(r), g.row(r + 1), g.row(r + 2), g.row(r + 3)]);
                    for (j, per_query) in dots.iter().enumerate() {
                        let heap = &mut heaps[base + j];
                        for (c, d) in per_query.iter().enumerate() {
                            let dist = distance_from_dot(*d);
                            if heap.wants(dist) && !exclude(base + j, r + c) {
                                heap.push(dist, r + c);
                            }
                        }
                    }
                    r += 4;
                }
                for r in r..end {
                    let dots = dot4(rows, g.row(r));
                    for (j, d) in dots.iter().enumerate() {
                        let dist = distance_from_dot(*d);
                        let heap = &mut heaps[base + j];
                        if heap.wants(dist) && !exclude(base + j, r) {
                            heap.push(dist, r);
                        }
                    }
                }
            }
            for slot in groups * 4..queries.len() {
                let q = queries[slot];
                let heap = &mut heaps[slot];
                // a lone query still gets four rows per pass; products commute
                let mut r = start;
                while r + 4 <= end {
                    let g = &self.gallery;
                    let dots = dot4([g.row(r), g.row(r + 1), g.row(r + 2), g.row(r + 3)], q);
                    for (j, d) in dots.iter().enumerate() {
                        let dist = distance_from_dot(*d);
                        if heap.wants(dist) && !exclude(slot, r + j) {
                            heap.push(dist, r + j);
                        }
                    }
                    r += 4;
                }
                for r in r..end {
                    let dist = distance_from_dot(dot(q, self.gallery.row(r)));
                    if heap.wants(dist) && !exclude(slot, r) {
                        heap.push(dist, r);
                    }
                }
            }
            start = end;
        }
        heaps
            .into_iter()
            .zip(queries)
            .map(|(h, q)| h.finish(|r| exact_distance(q, self.gallery.row(r))))
            .collect()
    }

    pub(crate) fn rank_all(&self, query: &[f32]) -> Vec<NeighborHit> {
        let mut hits: Vec<NeighborHit> = self
            .gallery
            .iter_rows()
            .enumerate()
            .map(|(row, g)| NeighborHit {
                row,
                distance: exact_distance(query, g),
            })
            .collect();
        sort_hits(&mut hits);
        hits
    }
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::{NeighborHit, TopK};
use crate::dataset::{normalize_row, FeatureMatrix};
use crate::distance::dot;
use crate::error::{Error, Result};

/// Random-hyperplane sign codes ranked by Hamming distance.
///
/// Reported distances are `1 - cos(pi * h / bits)`, the cosine distance
/// implied by the expected angle for Hamming distance `h`. The mapping is
/// strictly increasing in `h`, so order is exactly the Hamming order.
#[derive(Debug, Clone)]
pub struct LshIndex<'g> {
    gallery: &'g FeatureMatrix,
    bits: usize,
    seed: u64,
    /// `bits x dim`, unit-norm rows.
    planes: Vec<f32>,
    /// `rows x words` packed codes.
    codes: Vec<u64>,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Number of differing bits between two packed codes.
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

impl<'g> LshIndex<'g> {
    pub fn build(gallery: &'g FeatureMatrix, bits: usize, seed: u64) -> Result<Self> {
        if bits < 8 || !bits.is_multiple_of(8) {
            return Err(Error::param(format!(
                "LSH bits must be a positive multiple of 8, got {bits}"
            )));
        }
        let dim = gallery.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planes: Vec<f32> = (0..bits * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for (i, p) in planes.chunks_exact_mut(dim).enumerate() {
            normalize_row(p, i)
                .map_err(|e| Error::Invariant(format!("degenerate hyperplane: {e}")))?;
        }
        let mut index = Self {
            gallery,
            bits,
            seed,
            planes,
            codes: Vec::new(),
        };
        let words = words_for(bits);
        let mut codes = vec![0u64; gallery.rows() * words];
        codes
            .par_chunks_mut(words)
            .enumerate()
            .for_each(|(r, code)| index.encode_into(gallery.row(r), code));
        index.codes = codes;
        Ok(index)
    }

    pub(crate) fn from_parts(
        gallery: &'g FeatureMatrix,
        bits: usize,
        seed: u64,
        planes: Vec<f32>,
        codes: Vec<u64>,
    ) -> Result<Self> {
        if bits < 8 || !bits.is_multiple_of(8) {
            return Err(Error::IndexFormat(format!("invalid bit count {bits}")));
        }
        if planes.len() != bits * gallery.dim() || codes.len() != gallery.rows() * words_for(bits) {
            return Err(Error::IndexFormat("LSH state size mismatch".into()));
        }
        Ok(Self {
            gallery,
            bits,
            seed,
            planes,
            codes,
        })
    }

    pub fn gallery(&self) -> &'g FeatureMatrix {
        self.gallery
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn planes(&self) -> &[f32] {
        &self.planes
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn code(&self, row: usize) -> &[u64] {
        let w = words_for(self.bits);
        &self.codes[row * w..(row + 1) * w]
    }

    fn encode_into(&self, v: &[f32], out: &mut [u64]) {
        let dim = self.gallery.dim();
        for (b, plane) in self.planes.chunks_exact(dim).enumerate() {
            if dot(plane, v) >= 0.0 {
                out[b / 64] |= 1u64 << (b % 64);
            }
        }
    }

    /// Sign code of an arbitrary vector.
    pub fn encode(&self, v: &[f32]) -> Vec<u64> {
        let mut out = vec![0u64; words_for(self.bits)];
        self.encode_into(v, &mut out);
        out
    }

    /// Maps a Hamming distance onto the cosine-distance scale.
    pub fn proxy_distance(&self, h: u32) -> f64 {
        let theta = std::f64::consts::PI * h as f64 / self.bits as f64;
        (1.0 - theta.cos()).clamp(0.0, 2.0)
    }

    pub(crate) fn knn(
        &self,
        query: &[f32],
        k: usize,
        exclude: &dyn Fn(usize) -> bool,
    ) -> Vec<NeighborHit> {
        let code = self.encode(query);
        let mut heap = TopK::new(k);
        for r in 0..self.gallery.rows() {
            let h = hamming(&code, self.code(r)) as f32;
            if heap.admits(h, r) && !exclude(r) {
                heap.push(h, r);
            }
        }
        heap.into_sorted()
            .into_iter()
            .map(|c| NeighborHit {
                row: c.row,
                distance: self.proxy_distance(c.dist as u32),
            })
            .collect()
    }

    pub(crate) fn rank_all(&self, query: &[f32]) -> Vec<NeighborHit> {
        let code = self.encode(query);
        let mut keyed: Vec<(u32, usize)> = (0..self.gallery.rows())
            .map(|r| (hamming(&code, self.code(r)), r))
            .collect();
        keyed.sort_unstable();
        keyed
            .into_iter()
            .map(|(h, row)| NeighborHit {
                row,
                distance: self.proxy_distance(h),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::random_gallery;
    use super::*;

    #[test]
    fn invalid_bits() {
        let g = random_gallery(10, 4, 1);
        for bits in [0, 4, 12, 513] {
            assert!(LshIndex::build(&g, bits, 0).is_err(), "bits={bits}");
        }
        assert!(LshIndex::build(&g, 8, 0).is_ok());
    }

    #[test]
    fn identical_query_ranks_first() {
        let g = random_gallery(200, 32, 2);
        let lsh = LshIndex::build(&g, 128, 3).unwrap();
        for r in [0, 57, 199] {
            let hits = lsh.knn(g.row(r), 5, &|_| false);
            assert_eq!(hits[0].distance, 0.0);
            // any other zero-distance row must have a smaller index
            let first_zero = hits
                .iter()
                .take_while(|h| h.distance == 0.0)
                .map(|h| h.row)
                .collect::<Vec<_>>();
            assert!(first_zero.contains(&r));
        }
    }

    #[test]
    fn antipodal_pair_differs_in_every_bit() {
        let g = FeatureMatrix::from_rows(&[[0.3f32, -0.5, 0.8], [-0.3, 0.5, -0.8]]).unwrap();
        let lsh = LshIndex::build(&g, 8, 4).unwrap();
        assert_eq!(hamming(lsh.code(0), lsh.code(1)), 8);
    }

    #[test]
    fn proxy_is_monotone() {
        let g = random_gallery(4, 4, 5);
        let lsh = LshIndex::build(&g, 64, 6).unwrap();
        let mut prev = -1.0;
        for h in 0..=64 {
            let d = lsh.proxy_distance(h);
            assert!(d > prev);
            prev = d;
        }
        assert!((lsh.proxy_distance(64) - 2.0).abs() < 1e-6);
    }
}

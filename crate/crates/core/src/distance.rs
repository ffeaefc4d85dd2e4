//! Cosine-distance kernels.
//!
//! All dot products go through one kernel with a fixed summation order
//! (16 strided partial sums, a fixed reduction tree, then the tail), so every
//! caller, whether it scores one pair or a block of rows at a time, sees
//! bitwise-identical distances. The wider instruction-set variants only change
//! how many lanes are processed per instruction, never the order of the adds.
//!
//! The `f32` kernels use fused multiply-add throughout, including the
//! portable fallback, so every path rounds identically. The `f64` kernels use
//! a plain multiply: a product of two `f32` values is exact in `f64`, so fusing
//! would change nothing.

use rayon::prelude::*;

use crate::dataset::FeatureMatrix;
use crate::error::{Error, Result};

const LANES: usize = 16;

/// Default number of rows per tile in blocked pairwise evaluation.
pub const DEFAULT_TILE_ROWS: usize = 4096;

/// Default cap on a materialized distance matrix (256 MiB).
pub const DEFAULT_MEMORY_BUDGET: usize = 256 << 20;

#[inline(always)]
fn reduce(mut acc: [f32; LANES]) -> f32 {
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            acc[i] += acc[i + width];
        }
        width /= 2;
    }
    acc[0]
}

#[inline(always)]
fn reduce_f64(mut acc: [f64; LANES]) -> f64 {
    let mut width = LANES / 2;
    while width > 0 {
        for i in 0..width {
            acc[i] += acc[i + width];
        }
        width /= 2;
    }
    acc[0]
}

#[inline(always)]
fn finish(acc: [f32; LANES], a: &[f32], b: &[f32]) -> f32 {
    let mut tail = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        tail = x.mul_add(*y, tail);
    }
    reduce(acc) + tail
}

#[inline(always)]
fn finish_f64(acc: [f64; LANES], a: &[f32], b: &[f32]) -> f64 {
    let mut tail = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        tail += *x as f64 * *y as f64;
    }
    reduce_f64(acc) + tail
}

fn dot_portable(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; LANES];
    let n = a.len() / LANES * LANES;
    for (x, y) in a[..n].chunks_exact(LANES).zip(b[..n].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] = x[i].mul_add(y[i], acc[i]);
        }
    }
    finish(acc, &a[n..], &b[n..])
}

fn dot4_portable(rows: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
    rows.map(|r| dot_portable(r, b))
}

fn dot4x4_portable(a: [&[f32]; 4], b: [&[f32]; 4]) -> [[f32; 4]; 4] {
    a.map(|x| b.map(|y| dot_portable(x, y)))
}

/// Products of two `f32` values are exact in `f64`; only the additions round.
fn dot_f64_portable(a: &[f32], b: &[f32]) -> f64 {
    let mut acc = [0.0f64; LANES];
    let n = a.len() / LANES * LANES;
    for (x, y) in a[..n].chunks_exact(LANES).zip(b[..n].chunks_exact(LANES)) {
        for i in 0..LANES {
            acc[i] += x[i] as f64 * y[i] as f64;
        }
    }
    finish_f64(acc, &a[n..], &b[n..])
}

// Explicit kernels. Each keeps lane i accumulating elements i mod 16 with one
// fused multiply-add per element, so results match the portable code bit for bit.
#[cfg(target_arch = "x86_64")]
mod simd {
    use super::{finish, finish_f64, LANES};
    use std::arch::x86_64::*;

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot_avx512(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len() / LANES * LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc = _mm512_setzero_ps();
        let mut i = 0;
        while i < n {
            acc = _mm512_fmadd_ps(_mm512_loadu_ps(pa.add(i)), _mm512_loadu_ps(pb.add(i)), acc);
            i += LANES;
        }
        let mut lanes = [0.0f32; LANES];
        _mm512_storeu_ps(lanes.as_mut_ptr(), acc);
        finish(lanes, &a[n..], &b[n..])
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot4_avx512(rows: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
        let n = b.len() / LANES * LANES;
        let pb = b.as_ptr();
        let p = rows.map(|r| r.as_ptr());
        let mut acc = [_mm512_setzero_ps(); 4];
        let mut i = 0;
        while i < n {
            let y = _mm512_loadu_ps(pb.add(i));
            for r in 0..4 {
                acc[r] = _mm512_fmadd_ps(_mm512_loadu_ps(p[r].add(i)), y, acc[r]);
            }
            i += LANES;
        }
        let mut out = [0.0f32; 4];
        for r in 0..4 {
            let mut lanes = [0.0f32; LANES];
            _mm512_storeu_ps(lanes.as_mut_ptr(), acc[r]);
            out[r] = finish(lanes, &rows[r][n..], &b[n..]);
        }
        out
    }

    /// Sixteen dot products between four `a` rows and four `b` rows. The
    /// horizontal sums run as one shuffle tree over all sixteen accumulators,
    /// pairing lanes exactly as the scalar reduction does.
    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot4x4_avx512(a: [&[f32]; 4], b: [&[f32]; 4]) -> [[f32; 4]; 4] {
        let dim = b[0].len();
        let n = dim / LANES * LANES;
        let pa = a.map(|r| r.as_ptr());
        let pb = b.map(|r| r.as_ptr());
        // acc[4 * i + j] accumulates a[i] . b[j]
        let mut acc = [_mm512_setzero_ps(); 16];
        let mut k = 0;
        while k < n {
            let y = [0, 1, 2, 3].map(|j| _mm512_loadu_ps(pb[j].add(k)));
            for i in 0..4 {
                let x = _mm512_loadu_ps(pa[i].add(k));
                for j in 0..4 {
                    acc[4 * i + j] = _mm512_fmadd_ps(x, y[j], acc[4 * i + j]);
                }
            }
            k += LANES;
        }
        // width 8: two accumulators per register, 8 lanes each
        let mut l8 = [_mm512_setzero_ps(); 8];
        for t in 0..8 {
            let (x, y) = (acc[2 * t], acc[2 * t + 1]);
            l8[t] = _mm512_add_ps(
                _mm512_shuffle_f32x4::<0x44>(x, y),
                _mm512_shuffle_f32x4::<0xEE>(x, y),
            );
        }
        // width 4: four accumulators per register, one 128-bit block each
        let mut l4 = [_mm512_setzero_ps(); 4];
        for t in 0..4 {
            let (x, y) = (l8[2 * t], l8[2 * t + 1]);
            l4[t] = _mm512_add_ps(
                _mm512_shuffle_f32x4::<0x88>(x, y),
                _mm512_shuffle_f32x4::<0xDD>(x, y),
            );
        }
        // width 2 and width 1 work inside each 128-bit block
        let mut l2 = [_mm512_setzero_ps(); 2];
        for t in 0..2 {
            let (x, y) = (l4[2 * t], l4[2 * t + 1]);
            l2[t] = _mm512_add_ps(
                _mm512_shuffle_ps::<0x44>(x, y),
                _mm512_shuffle_ps::<0xEE>(x, y),
            );
        }
        let (x, y) = (l2[0], l2[1]);
        let sums = _mm512_add_ps(
            _mm512_shuffle_ps::<0x88>(x, y),
            _mm512_shuffle_ps::<0xDD>(x, y),
        );
        // lane 4 * c + m now holds accumulator 4 * m + c
        let mut tails = [0.0f32; LANES];
        for c in 0..4 {
            for m in 0..4 {
                let acc_index = 4 * m + c;
                let (i, j) = (acc_index / 4, acc_index % 4);
                let mut tail = 0.0f32;
                for (x, y) in a[i][n..].iter().zip(&b[j][n..]) {
                    tail = x.mul_add(*y, tail);
                }
                tails[4 * c + m] = tail;
            }
        }
        let total = _mm512_add_ps(sums, _mm512_loadu_ps(tails.as_ptr()));
        let mut lanes = [0.0f32; LANES];
        _mm512_storeu_ps(lanes.as_mut_ptr(), total);
        let mut out = [[0.0f32; 4]; 4];
        for c in 0..4 {
            for m in 0..4 {
                let acc_index = 4 * m + c;
                out[acc_index / 4][acc_index % 4] = lanes[4 * c + m];
            }
        }
        out
    }

    #[target_feature(enable = "avx512f")]
    pub(super) unsafe fn dot_f64_avx512(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() / LANES * LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut lo = _mm512_setzero_pd();
        let mut hi = _mm512_setzero_pd();
        let mut i = 0;
        while i < n {
            let xl = _mm512_cvtps_pd(_mm256_loadu_ps(pa.add(i)));
            let yl = _mm512_cvtps_pd(_mm256_loadu_ps(pb.add(i)));
            let xh = _mm512_cvtps_pd(_mm256_loadu_ps(pa.add(i + 8)));
            let yh = _mm512_cvtps_pd(_mm256_loadu_ps(pb.add(i + 8)));
            lo = _mm512_add_pd(lo, _mm512_mul_pd(xl, yl));
            hi = _mm512_add_pd(hi, _mm512_mul_pd(xh, yh));
            i += LANES;
        }
        let mut lanes = [0.0f64; LANES];
        _mm512_storeu_pd(lanes.as_mut_ptr(), lo);
        _mm512_storeu_pd(lanes.as_mut_ptr().add(8), hi);
        finish_f64(lanes, &a[n..], &b[n..])
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_avx2(a: &[f32], b: &[f32]) -> f32 {
        let n = a.len() / LANES * LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut lo = _mm256_setzero_ps();
        let mut hi = _mm256_setzero_ps();
        let mut i = 0;
        while i < n {
            lo = _mm256_fmadd_ps(_mm256_loadu_ps(pa.add(i)), _mm256_loadu_ps(pb.add(i)), lo);
            hi = _mm256_fmadd_ps(
                _mm256_loadu_ps(pa.add(i + 8)),
                _mm256_loadu_ps(pb.add(i + 8)),
                hi,
            );
            i += LANES;
        }
        let mut lanes = [0.0f32; LANES];
        _mm256_storeu_ps(lanes.as_mut_ptr(), lo);
        _mm256_storeu_ps(lanes.as_mut_ptr().add(8), hi);
        finish(lanes, &a[n..], &b[n..])
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot4_avx2(rows: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
        let n = b.len() / LANES * LANES;
        let pb = b.as_ptr();
        let p = rows.map(|r| r.as_ptr());
        let mut lo = [_mm256_setzero_ps(); 4];
        let mut hi = [_mm256_setzero_ps(); 4];
        let mut i = 0;
        while i < n {
            let yl = _mm256_loadu_ps(pb.add(i));
            let yh = _mm256_loadu_ps(pb.add(i + 8));
            for r in 0..4 {
                lo[r] = _mm256_fmadd_ps(_mm256_loadu_ps(p[r].add(i)), yl, lo[r]);
                hi[r] = _mm256_fmadd_ps(_mm256_loadu_ps(p[r].add(i + 8)), yh, hi[r]);
            }
            i += LANES;
        }
        let mut out = [0.0f32; 4];
        for r in 0..4 {
            let mut lanes = [0.0f32; LANES];
            _mm256_storeu_ps(lanes.as_mut_ptr(), lo[r]);
            _mm256_storeu_ps(lanes.as_mut_ptr().add(8), hi[r]);
            out[r] = finish(lanes, &rows[r][n..], &b[n..]);
        }
        out
    }

    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn dot_f64_avx2(a: &[f32], b: &[f32]) -> f64 {
        let n = a.len() / LANES * LANES;
        let (pa, pb) = (a.as_ptr(), b.as_ptr());
        let mut acc = [_mm256_setzero_pd(); 4];
        let mut i = 0;
        while i < n {
            for (q, a) in acc.iter_mut().enumerate() {
                let x = _mm256_cvtps_pd(_mm_loadu_ps(pa.add(i + 4 * q)));
                let y = _mm256_cvtps_pd(_mm_loadu_ps(pb.add(i + 4 * q)));
                *a = _mm256_add_pd(*a, _mm256_mul_pd(x, y));
            }
            i += LANES;
        }
        let mut lanes = [0.0f64; LANES];
        for (q, a) in acc.iter().enumerate() {
            _mm256_storeu_pd(lanes.as_mut_ptr().add(4 * q), *a);
        }
        finish_f64(lanes, &a[n..], &b[n..])
    }
}

#[cfg(target_arch = "x86_64")]
#[derive(Clone, Copy, PartialEq, Eq)]
enum Isa {
    Avx512,
    Avx2,
    Portable,
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn isa() -> Isa {
    use std::sync::OnceLock;
    static ISA: OnceLock<Isa> = OnceLock::new();
    *ISA.get_or_init(|| {
        if std::env::var_os("KWF_PORTABLE_KERNELS").is_some() {
            Isa::Portable
        } else if std::arch::is_x86_feature_detected!("avx512f") {
            Isa::Avx512
        } else if std::arch::is_x86_feature_detected!("avx2")
            && std::arch::is_x86_feature_detected!("fma")
        {
            Isa::Avx2
        } else {
            Isa::Portable
        }
    })
}

/// Dot product with the crate-wide fixed summation order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len(), "dot of vectors with different lengths");
    #[cfg(target_arch = "x86_64")]
    match isa() {
        // SAFETY: lengths are equal and the feature was detected at runtime.
        Isa::Avx512 => return unsafe { simd::dot_avx512(a, b) },
        Isa::Avx2 => return unsafe { simd::dot_avx2(a, b) },
        Isa::Portable => {}
    }
    dot_portable(a, b)
}

/// Four dot products against one shared vector. Each result is bitwise
/// equal to [`dot`] on the same pair.
#[inline]
pub fn dot4(rows: [&[f32]; 4], b: &[f32]) -> [f32; 4] {
    assert!(
        rows.iter().all(|r| r.len() == b.len()),
        "dot4 of vectors with different lengths"
    );
    #[cfg(target_arch = "x86_64")]
    match isa() {
        // SAFETY: lengths are equal and the feature was detected at runtime.
        Isa::Avx512 => return unsafe { simd::dot4_avx512(rows, b) },
        Isa::Avx2 => return unsafe { simd::dot4_avx2(rows, b) },
        Isa::Portable => {}
    }
    dot4_portable(rows, b)
}

/// All sixteen dot products between four `a` rows and four `b` rows;
/// `out[i][j]` is bitwise equal to `dot(a[i], b[j])`.
#[inline]
pub fn dot4x4(a: [&[f32]; 4], b: [&[f32]; 4]) -> [[f32; 4]; 4] {
    let dim = b[0].len();
    assert!(
        a.iter().chain(&b).all(|r| r.len() == dim),
        "dot4x4 of vectors with different lengths"
    );
    #[cfg(target_arch = "x86_64")]
    if isa() == Isa::Avx512 {
        // SAFETY: lengths are equal and the feature was detected at runtime.
        return unsafe { simd::dot4x4_avx512(a, b) };
    }
    dot4x4_portable(a, b)
}

/// Dot product accumulated in `f64` with the same fixed order as [`dot`].
/// Used wherever an ordering decision must not depend on `f32` rounding.
#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot of vectors with different lengths");
    #[cfg(target_arch = "x86_64")]
    match isa() {
        // SAFETY: lengths are equal and the feature was detected at runtime.
        Isa::Avx512 => return unsafe { simd::dot_f64_avx512(a, b) },
        Isa::Avx2 => return unsafe { simd::dot_f64_avx2(a, b) },
        Isa::Portable => {}
    }
    dot_f64_portable(a, b)
}

/// Upper bound on `|dot(a, b) - dot_f64(a, b)|` for vectors of length `dim`
/// whose norms multiply to at most `norm_product`. Twice the textbook
/// recursive-summation bound, so callers can treat it as conservative.
pub fn dot_error_bound(dim: usize, norm_product: f64) -> f64 {
    let depth = (dim / LANES) + LANES + 4;
    depth as f64 * f32::EPSILON as f64 * norm_product.max(1.0)
}

/// Converts a dot product into a distance in `[0, 2]`.
#[inline]
pub fn distance_from_dot_f64(dot: f64) -> f64 {
    (1.0 - dot).clamp(0.0, 2.0)
}

/// Converts a dot product of unit vectors into a distance in `[0, 2]`.
#[inline]
pub fn distance_from_dot(dot: f32) -> f32 {
    (1.0 - dot).clamp(0.0, 2.0)
}

/// `1 - dot(u, v)` for unit vectors, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(distance_from_dot(dot(u, v)))
}

/// Cosine distance for vectors of arbitrary (non-zero) norm. A zero vector is
/// treated as orthogonal to everything.
pub fn cosine_distance_any(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(cosine_distance_any_f64(u, v)? as f32)
}

/// [`cosine_distance_any`] without the final rounding to `f32`.
pub fn cosine_distance_any_f64(u: &[f32], v: &[f32]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let nu = dot_f64(u, u);
    let nv = dot_f64(v, v);
    if nu == 0.0 || nv == 0.0 {
        return Ok(1.0);
    }
    let cos = dot_f64(u, v) / (nu * nv).sqrt();
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Knobs for blocked pairwise evaluation.
#[derive(Debug, Clone, Copy)]
pub struct PairwiseOptions {
    pub tile_rows: usize,
    /// Upper bound in bytes on a fully materialized result.
    pub memory_budget: usize,
}

impl Default for PairwiseOptions {
    fn default() -> Self {
        Self {
            tile_rows: DEFAULT_TILE_ROWS,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }
}

/// Row-major matrix of distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

fn fill_tile(a: &FeatureMatrix, b: &FeatureMatrix, start: usize, out: &mut [f32]) {
    let cols = b.rows();
    let n_rows = out.len() / cols;
    let mut r = 0;
    while r + 4 <= n_rows {
        let rows = [
            a.row(start + r),
            a.row(start + r + 1),
            a.row(start + r + 2),
            a.row(start + r + 3),
        ];
        for (j, bj) in b.iter_rows().enumerate() {
            let d = dot4(rows, bj);
            for (k, dk) in d.iter().enumerate() {
                out[(r + k) * cols + j] = distance_from_dot(*dk);
            }
        }
        r += 4;
    }
    for rr in r..n_rows {
        let ar = a.row(start + rr);
        for (j, bj) in b.iter_rows().enumerate() {
            out[rr * cols + j] = distance_from_dot(dot(ar, bj));
        }
    }
}

/// Streams the `A x B` distance matrix in tiles of at most `tile_rows` rows.
/// Only one tile buffer is alive at a time; `f` receives the first row index
/// of the tile and the tile's row-major values.
pub fn for_each_tile<F>(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    tile_rows: usize,
    mut f: F,
) -> Result<()>
where
    F: FnMut(usize, &[f32]),
{
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let tile_rows = tile_rows.max(1);
    let mut buf = vec![0.0f32; tile_rows.min(a.rows()) * b.rows()];
    let mut start = 0;
    while start < a.rows() {
        let n = tile_rows.min(a.rows() - start);
        let tile = &mut buf[..n * b.rows()];
        fill_tile(a, b, start, tile);
        f(start, tile);
        start += n;
    }
    Ok(())
}

/// Materializes all pairwise cosine distances. Fails if the result would
/// exceed `opts.memory_budget`.
pub fn pairwise_distances(
    a: &FeatureMatrix,
    b: &FeatureMatrix,
    opts: PairwiseOptions,
) -> Result<DistanceMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimMismatch {
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let requested = a
        .rows()
        .saturating_mul(b.rows())
        .saturating_mul(std::mem::size_of::<f32>());
    if requested > opts.memory_budget {
        return Err(Error::MemoryBudget {
            requested,
            budget: opts.memory_budget,
        });
    }
    let cols = b.rows();
    let tile_rows = opts.tile_rows.max(1);
    let mut values = vec![0.0f32; a.rows() * cols];
    values
        .par_chunks_mut(tile_rows * cols)
        .enumerate()
        .for_each(|(t, chunk)| fill_tile(a, b, t * tile_rows, chunk));
    Ok(DistanceMatrix {
        rows: a.rows(),
        cols,
        values,
    })
}

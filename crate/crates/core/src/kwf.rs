//! K-nearest weighted fusion.
//!
//! A gallery feature is replaced by a weighted sum of its K nearest gallery
//! neighbors (the multi-view feature), optionally blended back with the
//! original single-view feature:
//!
//! ```text
//! f_mv = sum_k w_k * f_k
//! f*   = (1 - alpha) * f + alpha * f_mv
//! ```
//!
//! Weights come from the neighbor distances `d_k`:
//!
//! | strategy                 | `w_k` proportional to |
//! |--------------------------|-----------------------|
//! | uniform                  | `1`                   |
//! | inverse distance power   | `1 / d_k^p`           |
//! | exponential decay        | `exp(-d_k)`           |

use std::sync::Arc;

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemMeta, UNKNOWN_CAMERA};
use crate::error::{Error, Result};
use crate::index::{NeighborHit, NeighborIndex};

pub const DEFAULT_K: usize = 6;
pub const DEFAULT_M: usize = 100;
pub const DEFAULT_P: f64 = 2.0;
pub const DEFAULT_ALPHA: f64 = 1.0;
/// Floor applied to distances before inverse-power weighting.
pub const DEFAULT_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightingStrategy {
    Uniform,
    InverseDistancePower { p: f64 },
    ExponentialDecay,
}

impl Default for WeightingStrategy {
    fn default() -> Self {
        WeightingStrategy::InverseDistancePower { p: DEFAULT_P }
    }
}

impl WeightingStrategy {
    pub fn validate(&self) -> Result<()> {
        if let WeightingStrategy::InverseDistancePower { p } = self {
            if !(p.is_finite() && *p > 0.0) {
                return Err(Error::param(format!("power p must be > 0, got {p}")));
            }
        }
        Ok(())
    }

    /// Short name used on the command line.
    pub fn name(&self) -> &'static str {
        match self {
            WeightingStrategy::Uniform => "uniform",
            WeightingStrategy::InverseDistancePower { .. } => "idp",
            WeightingStrategy::ExponentialDecay => "expdecay",
        }
    }

    /// Parses `uniform`, `idp` or `expdecay`; `p` is used only by `idp`.
    pub fn parse(name: &str, p: Option<f64>) -> Result<Self> {
        let s = match name {
            "uniform" => WeightingStrategy::Uniform,
            "idp" | "inverse_distance_power" => WeightingStrategy::InverseDistancePower {
                p: p.unwrap_or(DEFAULT_P),
            },
            "expdecay" | "exponential_decay" => WeightingStrategy::ExponentialDecay,
            other => return Err(Error::param(format!("unknown weighting {other:?}"))),
        };
        if p.is_some() && !matches!(s, WeightingStrategy::InverseDistancePower { .. }) {
            return Err(Error::param("--p applies only to idp weighting"));
        }
        s.validate()?;
        Ok(s)
    }
}

/// Non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn normalized(raw: Vec<f64>) -> WeightVector {
    let total: f64 = raw.iter().sum();
    WeightVector(raw.into_iter().map(|w| w / total).collect())
}

/// Weights for `distances` under `strategy` with the default epsilon.
pub fn compute_weights(distances: &[f64], strategy: &WeightingStrategy) -> Result<WeightVector> {
    compute_weights_with_epsilon(distances, strategy, DEFAULT_EPSILON)
}

pub fn compute_weights_with_epsilon(
    distances: &[f64],
    strategy: &WeightingStrategy,
    epsilon: f64,
) -> Result<WeightVector> {
    if distances.is_empty() {
        return Err(Error::EmptyDistances);
    }
    if let Some(&bad) = distances.iter().find(|d| !d.is_finite() || **d < 0.0) {
        return Err(Error::InvalidDistance(bad));
    }
    strategy.validate()?;
    let raw = match *strategy {
        WeightingStrategy::Uniform => vec![1.0; distances.len()],
        WeightingStrategy::InverseDistancePower { p } => {
            // log-space keeps tiny distances and large p from overflowing
            let logs: Vec<f64> = distances
                .iter()
                .map(|&d| -p * d.max(epsilon).ln())
                .collect();
            let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            logs.iter().map(|l| (l - top).exp()).collect()
        }
        WeightingStrategy::ExponentialDecay => {
            let nearest = distances.iter().copied().fold(f64::INFINITY, f64::min);
            distances.iter().map(|&d| (-(d - nearest)).exp()).collect()
        }
    };
    Ok(normalized(raw))
}

/// A multi-view feature and the gallery rows it was fused from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedFeature {
    pub values: Vec<f32>,
    pub source_rows: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Weighted sum of neighbor features.
pub fn fuse(neighbors: &[&[f32]], weights: &WeightVector) -> Result<FusedFeature> {
    if neighbors.is_empty() || neighbors.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "fusion weights",
            expected: neighbors.len(),
            found: weights.len(),
        });
    }
    let dim = neighbors[0].len();
    if let Some(bad) = neighbors.iter().find(|n| n.len() != dim) {
        return Err(Error::DimMismatch {
            expected: dim,
            found: bad.len(),
        });
    }
    let mut acc = vec![0.0f64; dim];
    for (n, &w) in neighbors.iter().zip(weights.as_slice()) {
        for (a, &v) in acc.iter_mut().zip(n.iter()) {
            *a += w * v as f64;
        }
    }
    Ok(FusedFeature {
        values: acc.into_iter().map(|v| v as f32).collect(),
        source_rows: Vec::new(),
        weights: weights.as_slice().to_vec(),
    })
}

/// `(1 - alpha) * single + alpha * multi`. The endpoints return the
/// corresponding input unchanged.
pub fn blend(single: &[f32], multi: &FusedFeature, alpha: f64) -> Result<Vec<f32>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    if single.len() != multi.values.len() {
        return Err(Error::DimMismatch {
            expected: single.len(),
            found: multi.values.len(),
        });
    }
    if alpha == 0.0 {
        return Ok(single.to_vec());
    }
    if alpha == 1.0 {
        return Ok(multi.values.clone());
    }
    Ok(single
        .iter()
        .zip(&multi.values)
        .map(|(&s, &m)| ((1.0 - alpha) * s as f64 + alpha * m as f64) as f32)
        .collect())
}

/// Whether the camera filter runs before or after picking the K neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterOrder {
    /// Drop same-camera rows from the candidate stream, then keep the best K.
    #[default]
    FilterThenSelect,
    /// Keep the best K, then drop same-camera rows (fusing fewer than K).
    SelectThenDrop,
}

/// Stage-2 hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KwfParams {
    pub k: usize,
    pub m: usize,
    pub strategy: WeightingStrategy,
    pub alpha: f64,
    pub epsilon: f64,
    /// Allow the anchor itself among its neighbors.
    pub include_self: bool,
    pub filter_order: FilterOrder,
}

impl Default for KwfParams {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m: DEFAULT_M,
            strategy: WeightingStrategy::default(),
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
            include_self: false,
            filter_order: FilterOrder::FilterThenSelect,
        }
    }
}

impl KwfParams {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::param("K must be >= 1"));
        }
        if self.m == 0 {
            return Err(Error::param("M must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::param(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::param("epsilon must be > 0"));
        }
        self.strategy.validate()
    }
}

/// Multi-view feature of one gallery row, excluding rows seen by
/// `query_cam` (unless it is unknown) and, by default, the anchor itself.
pub fn multi_view_feature(
    anchor_row: usize,
    query_cam: i32,
    index: &NeighborIndex<'_>,
    meta: &[ItemMeta],
    params: &KwfParams,
) -> Result<FusedFeature> {
    Ok(
        multi_view_features(&[anchor_row], query_cam, index, meta, params)?
            .pop()
            .expect("one anchor in, one feature out"),
    )
}

/// Batched [`multi_view_feature`]; output order follows `anchors`.
pub fn multi_view_features(
    anchors: &[usize],
    query_cam: i32,
    index: &NeighborIndex<'_>,
    meta: &[ItemMeta],
    params: &KwfParams,
) -> Result<Vec<FusedFeature>> {
    let gallery = index.gallery();
    if meta.len() != gallery.rows() {
        return Err(Error::LengthMismatch {
            what: "gallery metadata",
            expected: gallery.rows(),
            found: meta.len(),
        });
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= gallery.rows()) {
        return Err(Error::InvalidRow {
            row: bad,
            rows: gallery.rows(),
        });
    }
    let same_camera = |row: usize| query_cam != UNKNOWN_CAMERA && meta[row].camera_id == query_cam;
    let is_self = |slot: usize, row: usize| !params.include_self && row == anchors[slot];

    let queries: Vec<&[f32]> = anchors.iter().map(|&a| gallery.row(a)).collect();
    let hit_lists: Vec<Vec<NeighborHit>> = match params.filter_order {
        FilterOrder::FilterThenSelect => index.knn_batch(&queries, params.k, &|slot, row| {
            is_self(slot, row) || same_camera(row)
        })?,
        FilterOrder::SelectThenDrop => index
            .knn_batch(&queries, params.k, &|slot, row| is_self(slot, row))?
            .into_iter()
            .map(|hits| hits.into_iter().filter(|h| !same_camera(h.row)).collect())
            .collect(),
    };

    anchors
        .iter()
        .zip(hit_lists)
        .map(|(&anchor, hits)| {
            if hits.is_empty() {
                return Ok(FusedFeature {
                    values: gallery.row(anchor).to_vec(),
                    source_rows: Vec::new(),
                    weights: Vec::new(),
                });
            }
            let distances: Vec<f64> = hits.iter().map(|h| h.distance).collect();
            let weights =
                compute_weights_with_epsilon(&distances, &params.strategy, params.epsilon)?;
            let rows: Vec<&[f32]> = hits.iter().map(|h| gallery.row(h.row)).collect();
            let mut fused = fuse(&rows, &weights)?;
            fused.source_rows = hits.iter().map(|h| h.row).collect();
            Ok(fused)
        })
        .collect()
}

/// Memo of fused features keyed by `(anchor_row, query_cam)`.
///
/// Entries are only valid for the index and parameters they were computed
/// with; use one cache per run. Concurrent inserts for the same key carry
/// identical values, so the last writer winning is harmless.
#[derive(Debug, Default)]
pub struct FusionCache {
    map: DashMap<(usize, i32), Arc<FusedFeature>>,
}

impl FusionCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, anchor_row: usize, query_cam: i32) -> Option<Arc<FusedFeature>> {
        self.map
            .get(&(anchor_row, query_cam))
            .map(|e| Arc::clone(e.value()))
    }

    pub fn insert(&self, anchor_row: usize, query_cam: i32, feature: Arc<FusedFeature>) {
        self.map.insert((anchor_row, query_cam), feature);
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Visits every cached entry.
    pub fn for_each(&self, mut f: impl FnMut((usize, i32), &FusedFeature)) {
        for e in self.map.iter() {
            f(*e.key(), e.value());
        }
    }
}

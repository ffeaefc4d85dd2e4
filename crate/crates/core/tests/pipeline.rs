//! End-to-end pipeline behavior on hand-built and synthetic fixtures.

use std::time::Duration;

use kwf_rerank::index::{IndexParams, NeighborIndex};
use kwf_rerank::kwf::{FusionCache, KwfParams, WeightingStrategy};
use kwf_rerank::pipeline::{initial_rank, rerank};
use kwf_rerank::synth::{generate, SynthConfig};
use kwf_rerank::{Dataset, FeatureMatrix, ItemMeta, Pipeline};
use serde_json::Value;

fn goldens() -> Value {
    let text = std::fs::read_to_string(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/fixtures/goldens.json"
    ))
    .unwrap();
    serde_json::from_str(&text).unwrap()
}

fn ids(v: &Value) -> Vec<usize> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_u64().unwrap() as usize)
        .collect()
}

/// Unit direction at `azimuth` degrees in the xy-plane, tilted by `tilt`
/// degrees towards z.
fn direction(azimuth: f64, tilt: f64) -> [f32; 3] {
    let (a, t) = (azimuth.to_radians(), tilt.to_radians());
    [
        (a.cos() * t.cos()) as f32,
        (a.sin() * t.cos()) as f32,
        t.sin() as f32,
    ]
}

/// (azimuth, tilt, person_id, camera_id). The query looks along azimuth 0
/// from camera 0. Row 0 is an impostor closer to the query than the true
/// match (row 1), but the true match's same-identity neighbors sit on both
/// sides of it out of plane, so fusing them pulls it towards the query.
const PROMOTION_GALLERY: [(f64, f64, i64, i32); 7] = [
    (10.0, 0.0, 2, 1),
    (-15.0, 0.0, 1, 2),
    (-15.0, 10.0, 1, 1),
    (-15.0, -12.0, 1, 2),
    (25.0, 0.0, 2, 2),
    (27.0, 0.0, 2, 1),
    (29.0, 0.0, 2, 2),
];

fn promotion_dataset() -> Dataset {
    let rows: Vec<[f32; 3]> = PROMOTION_GALLERY
        .iter()
        .map(|&(a, t, _, _)| direction(a, t))
        .collect();
    let meta = PROMOTION_GALLERY
        .iter()
        .enumerate()
        .map(|(i, &(_, _, p, c))| ItemMeta::new(format!("g{i}"), p, c))
        .collect();
    Dataset::new(
        FeatureMatrix::from_rows(&[direction(0.0, 0.0)]).unwrap(),
        vec![ItemMeta::new("q0", 1, 0)],
        FeatureMatrix::from_rows(&rows).unwrap(),
        meta,
    )
    .unwrap()
}

#[test]
fn fusion_promotes_the_true_match() {
    let ds = promotion_dataset();
    let golden = &goldens()["promotion"];
    let params = KwfParams {
        k: 2,
        m: 7,
        strategy: WeightingStrategy::Uniform,
        ..KwfParams::default()
    };
    let index = NeighborIndex::build(&ds.gallery_features, &IndexParams::default()).unwrap();
    let s1 = initial_rank(0, &ds, &index).unwrap();
    let r = rerank(0, &s1, &ds, &index, &params, None).unwrap();
    let stage1: Vec<usize> = r.stage1.rows().collect();
    let stage2: Vec<usize> = r.stage2.rows().collect();
    assert_eq!(stage1, ids(&golden["stage1"]));
    assert_eq!(stage2, ids(&golden["stage2"]));
    assert_eq!(stage1.iter().position(|&x| x == 1), Some(1));
    assert_eq!(stage2.iter().position(|&x| x == 1), Some(0));
}

#[test]
fn cached_and_uncached_runs_agree() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let index = NeighborIndex::build(&ds.gallery_features, &IndexParams::default()).unwrap();
    let params = KwfParams::default();
    let cache = FusionCache::new();
    for q in 0..ds.num_queries() {
        let s1 = initial_rank(q, &ds, &index).unwrap();
        let cold = rerank(q, &s1, &ds, &index, &params, None).unwrap();
        let warm = rerank(q, &s1, &ds, &index, &params, Some(&cache)).unwrap();
        assert_eq!(cold.stage2, warm.stage2, "query {q}");
    }
}

#[test]
fn parallel_runs_are_deterministic() {
    let ds = generate(&SynthConfig::default()).unwrap();
    let a = Pipeline::new(&ds, &IndexParams::default(), KwfParams::default())
        .unwrap()
        .run_all()
        .unwrap();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap();
    let b = pool.install(|| {
        Pipeline::new(&ds, &IndexParams::default(), KwfParams::default())
            .unwrap()
            .run_all()
            .unwrap()
    });
    for (x, y) in a.iter().zip(&b) {
        assert_eq!((&x.stage1, &x.stage2), (&y.stage1, &y.stage2));
    }
}

/// Median over repeats of the total uncached Stage-2 time.
fn stage2_time(ds: &Dataset, index: &NeighborIndex<'_>, m: usize) -> Duration {
    let params = KwfParams {
        m,
        ..KwfParams::default()
    };
    let lists: Vec<_> = (0..ds.num_queries())
        .map(|q| initial_rank(q, ds, index).unwrap())
        .collect();
    let mut runs: Vec<Duration> = (0..5)
        .map(|_| {
            lists
                .iter()
                .enumerate()
                .map(|(q, s1)| {
                    rerank(q, s1, ds, index, &params, None)
                        .unwrap()
                        .timing
                        .stage2
                })
                .sum()
        })
        .collect();
    runs.sort();
    runs[runs.len() / 2]
}

#[test]
fn stage2_cost_grows_with_m() {
    let ds = generate(&SynthConfig {
        identities: 40,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = NeighborIndex::build(&ds.gallery_features, &IndexParams::default()).unwrap();
    let times: Vec<Duration> = [5, 20, 80]
        .iter()
        .map(|&m| stage2_time(&ds, &index, m))
        .collect();
    // each step quadruples the work; allow generous timing noise
    assert!(times[0] < times[1] && times[1] < times[2], "{times:?}");
}

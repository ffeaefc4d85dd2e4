//! Fixtures shared by integration tests.
#![allow(dead_code)]

use kwf_rerank::FeatureMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub const CLUSTERS: usize = 10;
pub const CLUSTER_ROWS: usize = 20;
pub const CLUSTER_DIM: usize = 16;
pub const CLUSTER_SPREAD: f32 = 0.5;
pub const CLUSTER_QUERIES: usize = 100;
pub const CLUSTER_SEED: u64 = 5;

/// Ten Gaussian clusters of unit vectors: a gallery of `CLUSTERS *
/// CLUSTER_ROWS` rows and `CLUSTER_QUERIES` held-out queries drawn from the
/// same clusters in round-robin order.
pub fn cluster_fixture() -> (FeatureMatrix, Vec<Vec<f32>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(CLUSTER_SEED);
    let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
    let scale = (CLUSTER_DIM as f32).sqrt().recip();
    let centers: Vec<Vec<f32>> = (0..CLUSTERS)
        .map(|_| {
            (0..CLUSTER_DIM)
                .map(|_| normal.sample(&mut rng) * scale)
                .collect()
        })
        .collect();
    let mut draw = |c: usize| -> Vec<f32> {
        let v: Vec<f32> = centers[c]
            .iter()
            .map(|x| x + CLUSTER_SPREAD * scale * normal.sample(&mut rng))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    };
    let rows: Vec<Vec<f32>> = (0..CLUSTERS * CLUSTER_ROWS)
        .map(|i| draw(i % CLUSTERS))
        .collect();
    let queries = (0..CLUSTER_QUERIES).map(|i| draw(i % CLUSTERS)).collect();
    (FeatureMatrix::from_rows(&rows).expect("non-empty"), queries)
}

//! Two-stage person re-identification ranking with K-nearest weighted
//! fusion re-ranking.
//!
//! Stage 1 ranks the whole gallery by cosine distance to the query. Stage 2
//! replaces each of the top `M` gallery features by a blend of itself and a
//! weighted mean of its `K` nearest gallery neighbors taken from other
//! cameras, then re-sorts that head by distance to the query.
//!
//! ```
//! use kwf_rerank::{generate, evaluate, IndexParams, KwfParams, Pipeline, SynthConfig};
//!
//! let ds = generate(&SynthConfig::default()).unwrap();
//! let results = Pipeline::new(&ds, &IndexParams::default(), KwfParams::default())
//!     .unwrap()
//!     .run_all()
//!     .unwrap();
//! let report = evaluate(&results, &ds).unwrap();
//! assert_eq!(results.len(), ds.num_queries());
//! assert!((0.0..=1.0).contains(&report.rank1));
//! ```

pub mod api;
pub mod baselines;
pub mod dataset;
pub mod distance;
pub mod error;
pub mod index;
pub mod kwf;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use api::{evaluate_rankings, rerank_arrays, RerankOptions, VERSION};
pub use baselines::QeParams;
pub use dataset::{Dataset, FeatureMatrix, ItemMeta};
pub use error::{Error, ErrorKind, Result};
pub use index::{Backend, IndexParams, NeighborHit, NeighborIndex};
pub use kwf::{FilterOrder, FusionCache, KwfParams, WeightingStrategy};
pub use metrics::{evaluate, MetricsReport};
pub use pipeline::{initial_rank, rerank, run_all, Method, Pipeline, RankedList, RerankResult};
pub use synth::{generate, SynthConfig};

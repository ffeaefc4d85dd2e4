//! Array-level entry points for embedding the engine in other runtimes.
//!
//! `rerank_arrays` takes raw row-major features plus camera lists and returns
//! the Stage-2 ordering of gallery rows per query. `evaluate_rankings` scores
//! such orderings. Caller buffers are only read.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::baselines::QeParams;
use crate::dataset::{Dataset, FeatureMatrix, ItemMeta};
use crate::error::{Error, Result};
use crate::index::{Backend, IndexParams};
use crate::kwf::{FilterOrder, KwfParams, WeightingStrategy};
use crate::metrics::{self, MetricsReport};
use crate::pipeline::{Method, Pipeline};

/// Engine version, shared by every front end.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Every re-ranking knob in one serializable bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RerankOptions {
    pub method: Method,
    pub kwf: KwfParams,
    pub qe: QeParams,
    pub index: IndexParams,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::param(format!("option {key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" => Ok(false),
        _ => Err(Error::param(format!(
            "option {key}: expected a boolean, got {value:?}"
        ))),
    }
}

impl RerankOptions {
    /// Builds options from key-value pairs. Keys follow the CLI flag names
    /// with `-` or `_` as separator; unknown keys are an error.
    pub fn from_pairs<K: AsRef<str>, V: AsRef<str>>(
        pairs: impl IntoIterator<Item = (K, V)>,
    ) -> Result<Self> {
        let map: BTreeMap<String, String> = pairs
            .into_iter()
            .map(|(k, v)| (k.as_ref().replace('-', "_"), v.as_ref().to_string()))
            .collect();
        let mut o = Self::default();
        let mut weighting: Option<String> = None;
        let mut p: Option<f64> = None;
        for (key, value) in &map {
            let v = value.as_str();
            match key.as_str() {
                "method" => o.method = v.parse()?,
                "k" => o.kwf.k = parse_num(key, v)?,
                "m" => o.kwf.m = parse_num(key, v)?,
                "alpha" => o.kwf.alpha = parse_num(key, v)?,
                "epsilon" => o.kwf.epsilon = parse_num(key, v)?,
                "weighting" => weighting = Some(v.to_string()),
                "p" => p = Some(parse_num(key, v)?),
                "include_self" => o.kwf.include_self = parse_bool(key, v)?,
                "select_then_drop" => {
                    o.kwf.filter_order = if parse_bool(key, v)? {
                        FilterOrder::SelectThenDrop
                    } else {
                        FilterOrder::FilterThenSelect
                    }
                }
                "index" => o.index.backend = v.parse::<Backend>()?,
                "nlist" => o.index.nlist = Some(parse_num(key, v)?),
                "nprobe" => o.index.nprobe = parse_num(key, v)?,
                "bits" => o.index.bits = parse_num(key, v)?,
                "seed" => o.index.seed = parse_num(key, v)?,
                "n_expand" => o.qe.n_expand = parse_num(key, v)?,
                "qe_alpha" => o.qe.qe_alpha = parse_num(key, v)?,
                other => return Err(Error::param(format!("unknown option {other:?}"))),
            }
        }
        if weighting.is_some() || p.is_some() {
            let name = weighting.unwrap_or_else(|| o.kwf.strategy.name().to_string());
            o.kwf.strategy = WeightingStrategy::parse(&name, p)?;
        }
        o.validate()?;
        Ok(o)
    }

    pub fn validate(&self) -> Result<()> {
        self.kwf.validate()?;
        self.qe.validate()
    }
}

fn check_matrix(what: &'static str, values: &[f32], rows: usize, dim: usize) -> Result<()> {
    if values.len() != rows * dim {
        return Err(Error::LengthMismatch {
            what,
            expected: rows * dim,
            found: values.len(),
        });
    }
    Ok(())
}

/// Builds a dataset from raw arrays. Person ids are unknown at re-rank time
/// and are recorded as 0; they play no part in ordering.
pub fn dataset_from_arrays(
    query: &[f32],
    gallery: &[f32],
    dim: usize,
    query_cams: &[i32],
    gallery_cams: &[i32],
) -> Result<Dataset> {
    let q_rows = query_cams.len();
    let g_rows = gallery_cams.len();
    check_matrix("query features", query, q_rows, dim)?;
    check_matrix("gallery features", gallery, g_rows, dim)?;
    let meta = |prefix: &str, cams: &[i32]| -> Vec<ItemMeta> {
        cams.iter()
            .enumerate()
            .map(|(i, &c)| ItemMeta::new(format!("{prefix}{i}"), 0, c))
            .collect()
    };
    Dataset::new(
        FeatureMatrix::from_raw(q_rows, dim, query.to_vec())?,
        meta("q", query_cams),
        FeatureMatrix::from_raw(g_rows, dim, gallery.to_vec())?,
        meta("g", gallery_cams),
    )
}

/// Stage-2 ordering of gallery rows for every query row. The row counts are
/// given by the camera lists; an empty query set yields an empty result.
pub fn rerank_arrays(
    query: &[f32],
    gallery: &[f32],
    dim: usize,
    query_cams: &[i32],
    gallery_cams: &[i32],
    options: &RerankOptions,
) -> Result<Vec<Vec<usize>>> {
    options.validate()?;
    if query_cams.is_empty() {
        check_matrix("query features", query, 0, dim)?;
        return Ok(Vec::new());
    }
    let dataset = dataset_from_arrays(query, gallery, dim, query_cams, gallery_cams)?;
    let pipeline = Pipeline::new(&dataset, &options.index, options.kwf)?
        .with_method(options.method, options.qe)?;
    pipeline.run_each(|r| r.stage2.rows().collect())
}

/// Scores rankings of gallery rows, one per query.
pub fn evaluate_rankings(
    rankings: &[Vec<usize>],
    query_meta: &[ItemMeta],
    gallery_meta: &[ItemMeta],
) -> Result<MetricsReport> {
    metrics::evaluate_rankings(rankings, query_meta, gallery_meta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn fixture() -> Dataset {
        generate(&SynthConfig {
            identities: 12,
            ..Default::default()
        })
        .unwrap()
    }

    fn cams(meta: &[ItemMeta]) -> Vec<i32> {
        meta.iter().map(|m| m.camera_id).collect()
    }

    fn run(ds: &Dataset, o: &RerankOptions) -> Vec<Vec<usize>> {
        rerank_arrays(
            ds.query_features.values(),
            ds.gallery_features.values(),
            ds.dim(),
            &cams(&ds.query_meta),
            &cams(&ds.gallery_meta),
            o,
        )
        .unwrap()
    }

    #[test]
    fn matches_native_pipeline() {
        let ds = fixture();
        let o = RerankOptions::default();
        let native: Vec<Vec<usize>> = Pipeline::new(&ds, &o.index, o.kwf)
            .unwrap()
            .run_all()
            .unwrap()
            .iter()
            .map(|r| r.stage2.rows().collect())
            .collect();
        assert_eq!(run(&ds, &o), native);
    }

    #[test]
    fn alpha_zero_is_cosine_argsort() {
        let ds = fixture();
        let o = RerankOptions::from_pairs([("alpha", "0")]).unwrap();
        let got = run(&ds, &o);
        for (q, rows) in got.iter().enumerate() {
            let query = ds.query_features.row(q);
            let mut want: Vec<usize> = (0..ds.num_gallery()).collect();
            let d = |r: usize| {
                crate::distance::cosine_distance(query, ds.gallery_features.row(r)).unwrap()
            };
            want.sort_by(|&a, &b| d(a).total_cmp(&d(b)).then(a.cmp(&b)));
            assert_eq!(rows, &want);
        }
    }

    #[test]
    fn empty_query_set() {
        let ds = fixture();
        let out = rerank_arrays(
            &[],
            ds.gallery_features.values(),
            ds.dim(),
            &[],
            &cams(&ds.gallery_meta),
            &RerankOptions::default(),
        )
        .unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn caller_arrays_untouched() {
        let ds = fixture();
        let raw: Vec<f32> = ds
            .gallery_features
            .values()
            .iter()
            .map(|v| v * 3.0)
            .collect();
        let before = raw.clone();
        rerank_arrays(
            ds.query_features.values(),
            &raw,
            ds.dim(),
            &cams(&ds.query_meta),
            &cams(&ds.gallery_meta),
            &RerankOptions::default(),
        )
        .unwrap();
        assert_eq!(raw, before);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let ds = fixture();
        let err = rerank_arrays(
            ds.query_features.values(),
            &ds.gallery_features.values()[1..],
            ds.dim(),
            &cams(&ds.query_meta),
            &cams(&ds.gallery_meta),
            &RerankOptions::default(),
        );
        assert!(matches!(err, Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn options_parse() {
        let o = RerankOptions::from_pairs([
            ("method", "kwf"),
            ("k", "4"),
            ("weighting", "idp"),
            ("p", "3"),
            ("include-self", "true"),
            ("index", "lsh"),
            ("bits", "256"),
        ])
        .unwrap();
        assert_eq!(o.kwf.k, 4);
        assert_eq!(
            o.kwf.strategy,
            WeightingStrategy::InverseDistancePower { p: 3.0 }
        );
        assert!(o.kwf.include_self);
        assert_eq!(o.index.backend, Backend::Lsh);
        assert!(RerankOptions::from_pairs([("bogus", "1")]).is_err());
        assert!(RerankOptions::from_pairs([("weighting", "uniform"), ("p", "2")]).is_err());
        assert!(RerankOptions::from_pairs([("alpha", "1.5")]).is_err());
    }

    #[test]
    fn evaluate_examples() {
        let g = |pid, cam| ItemMeta::new(format!("{pid}_{cam}"), pid, cam);
        let qm = vec![g(1, 0), g(2, 0)];
        let gm = vec![g(1, 1), g(2, 1), g(3, 2)];
        let perfect = evaluate_rankings(&[vec![0, 1, 2], vec![1, 0, 2]], &qm, &gm).unwrap();
        assert_eq!((perfect.rank1, perfect.map), (1.0, 1.0));
        let half = evaluate_rankings(&[vec![0, 1, 2], vec![0, 2, 1]], &qm, &gm).unwrap();
        assert_eq!(half.rank1, 0.5);
        let junk = evaluate_rankings(&[vec![0, 1, 2]], &[g(9, 0)], &gm).unwrap();
        assert_eq!(junk.skipped, 1);
    }

    #[test]
    fn version_matches_package() {
        assert_eq!(VERSION, "0.1.0");
    }
}

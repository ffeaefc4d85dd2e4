use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use kwf_rerank::{
    Backend, FilterOrder, IndexParams, KwfParams, Method, QeParams, RerankOptions, SynthConfig,
    WeightingStrategy,
};
use serde::{Deserialize, Serialize};

use crate::ConfigError;

#[derive(Parser, Debug)]
#[command(name = "kwf", version = kwf_rerank::VERSION, about = "Two-stage ReID ranking with K-nearest weighted fusion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Rank, re-rank and score a dataset.
    Eval(EvalArgs),
    /// Evaluate once per value of one hyperparameter.
    Sweep(SweepArgs),
    /// Time repeated evaluations.
    Bench(BenchArgs),
    /// Write a synthetic dataset.
    Synth(SynthArgs),
    /// Build a neighbor index over a gallery and save it.
    BuildIndex(BuildIndexArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct InputArgs {
    /// Directory holding query.npy, query.csv, gallery.npy and gallery.csv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub query_features: Option<PathBuf>,
    #[arg(long)]
    pub query_meta: Option<PathBuf>,
    #[arg(long)]
    pub gallery_features: Option<PathBuf>,
    #[arg(long)]
    pub gallery_meta: Option<PathBuf>,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    Kwf,
    Aqe,
    Alphaqe,
    None,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightingArg {
    Uniform,
    Idp,
    Expdecay,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum IndexArg {
    Flat,
    Ivfflat,
    Lsh,
}

#[derive(Args, Debug, Clone)]
pub struct IndexArgs {
    #[arg(long, value_enum, default_value = "flat")]
    pub index: IndexArg,
    /// IVF list count; defaults to round(sqrt(N)).
    #[arg(long)]
    pub nlist: Option<usize>,
    #[arg(long, default_value_t = kwf_rerank::index::DEFAULT_NPROBE)]
    pub nprobe: usize,
    #[arg(long, default_value_t = kwf_rerank::index::DEFAULT_LSH_BITS)]
    pub bits: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl IndexArgs {
    pub fn params(&self) -> IndexParams {
        IndexParams {
            backend: match self.index {
                IndexArg::Flat => Backend::Flat,
                IndexArg::Ivfflat => Backend::IvfFlat,
                IndexArg::Lsh => Backend::Lsh,
            },
            nlist: self.nlist,
            nprobe: self.nprobe,
            bits: self.bits,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum, default_value = "kwf")]
    pub method: MethodArg,
    #[arg(long, default_value_t = kwf_rerank::kwf::DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = kwf_rerank::kwf::DEFAULT_M)]
    pub m: usize,
    #[arg(long, value_enum, default_value = "idp")]
    pub weighting: WeightingArg,
    /// Exponent for inverse distance power weighting (default 2).
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long, default_value_t = kwf_rerank::kwf::DEFAULT_ALPHA)]
    pub alpha: f64,
    /// Let a gallery row count among its own neighbors.
    #[arg(long)]
    pub include_self: bool,
    /// Pick K neighbors first, then drop same-camera ones.
    #[arg(long)]
    pub select_then_drop: bool,
    #[command(flatten)]
    pub index: IndexArgs,
    /// Load a prebuilt index instead of building one.
    #[arg(long)]
    pub index_file: Option<PathBuf>,
    /// Worker threads; defaults to the available cores.
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, default_value_t = kwf_rerank::baselines::DEFAULT_N_EXPAND)]
    pub n_expand: usize,
    #[arg(long, default_value_t = kwf_rerank::baselines::DEFAULT_QE_ALPHA)]
    pub qe_alpha: f64,
    /// Re-run the configuration embedded in a previous report. Input and
    /// parameter flags are ignored; output flags still apply.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// JSON report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON Lines dump of both rankings per query.
    #[arg(long)]
    pub dump: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub dump_depth: usize,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    K,
    M,
    Alpha,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma list (`0,0.5,1`) or inclusive range (`2..10`, `20..160:20`).
    #[arg(long)]
    pub values: String,
    /// CSV output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory receiving one JSON report per value.
    #[arg(long)]
    pub report_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 5)]
    pub repeats: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 50)]
    pub identities: usize,
    #[arg(long, default_value_t = 4)]
    pub cameras: usize,
    #[arg(long, default_value_t = 3)]
    pub images_per_camera: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.8)]
    pub view_bias: f64,
    #[arg(long, default_value_t = 0.2)]
    pub noise: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            identities: self.identities,
            cameras: self.cameras,
            images_per_identity_per_camera: self.images_per_camera,
            dim: self.dim,
            view_bias_sigma: self.view_bias,
            noise_sigma: self.noise,
            seed: self.seed,
        }
    }
}

#[derive(Args, Debug)]
pub struct BuildIndexArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[command(flatten)]
    pub index: IndexArgs,
    #[arg(long)]
    pub out: PathBuf,
}

/// Resolved input files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub query_features: PathBuf,
    pub query_meta: PathBuf,
    pub gallery_features: PathBuf,
    pub gallery_meta: PathBuf,
}

fn pick(
    explicit: &Option<PathBuf>,
    dir: Option<&Path>,
    name: &str,
    flag: &str,
) -> Result<PathBuf, ConfigError> {
    explicit
        .clone()
        .or_else(|| dir.map(|d| d.join(name)))
        .ok_or_else(|| ConfigError(format!("missing --{flag} (or --data)")))
}

impl InputArgs {
    pub fn gallery_features(&self) -> Result<PathBuf, ConfigError> {
        pick(
            &self.gallery_features,
            self.data.as_deref(),
            "gallery.npy",
            "gallery-features",
        )
    }

    pub fn resolve(&self) -> Result<DataPaths, ConfigError> {
        let dir = self.data.as_deref();
        Ok(DataPaths {
            query_features: pick(&self.query_features, dir, "query.npy", "query-features")?,
            query_meta: pick(&self.query_meta, dir, "query.csv", "query-meta")?,
            gallery_features: self.gallery_features()?,
            gallery_meta: pick(&self.gallery_meta, dir, "gallery.csv", "gallery-meta")?,
        })
    }
}

/// The full effective configuration of a run, embedded in every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub paths: DataPaths,
    pub options: RerankOptions,
    pub index_file: Option<PathBuf>,
    pub threads: usize,
}

#[derive(Deserialize)]
struct Embedded {
    config: RunConfig,
}

impl RunArgs {
    pub fn resolve(&self) -> anyhow::Result<RunConfig> {
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read {}: {e}", path.display())))?;
            // a previous report or a bare configuration
            let cfg = serde_json::from_str::<Embedded>(&text)
                .map(|e| e.config)
                .or_else(|_| serde_json::from_str::<RunConfig>(&text))
                .map_err(|e| {
                    ConfigError(format!(
                        "{} holds no run configuration: {e}",
                        path.display()
                    ))
                })?;
            cfg.options.validate()?;
            return Ok(cfg);
        }
        let strategy = match (self.weighting, self.p) {
            (WeightingArg::Idp, p) => WeightingStrategy::InverseDistancePower {
                p: p.unwrap_or(kwf_rerank::kwf::DEFAULT_P),
            },
            (_, Some(_)) => {
                return Err(ConfigError("--p only applies to --weighting idp".into()).into())
            }
            (WeightingArg::Uniform, None) => WeightingStrategy::Uniform,
            (WeightingArg::Expdecay, None) => WeightingStrategy::ExponentialDecay,
        };
        let options = RerankOptions {
            method: match self.method {
                MethodArg::Kwf => Method::Kwf,
                MethodArg::Aqe => Method::Aqe,
                MethodArg::Alphaqe => Method::AlphaQe,
                MethodArg::None => Method::None,
            },
            kwf: KwfParams {
                k: self.k,
                m: self.m,
                strategy,
                alpha: self.alpha,
                include_self: self.include_self,
                filter_order: if self.select_then_drop {
                    FilterOrder::SelectThenDrop
                } else {
                    FilterOrder::FilterThenSelect
                },
                ..KwfParams::default()
            },
            qe: QeParams {
                n_expand: self.n_expand,
                qe_alpha: self.qe_alpha,
            },
            index: self.index.params(),
        };
        options.validate()?;
        let threads = match self.threads {
            Some(0) => return Err(ConfigError("--threads must be >= 1".into()).into()),
            Some(t) => t,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(RunConfig {
            paths: self.input.resolve()?,
            options,
            index_file: self.index_file.clone(),
            threads,
        })
    }
}

/// Parses `a,b,c`, `start..end` or `start..end:step` (inclusive).
pub fn parse_values(text: &str) -> Result<Vec<f64>, ConfigError> {
    let bad = || ConfigError(format!("cannot parse --values {text:?}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
    if let Some((start, rest)) = text.split_once("..") {
        let (end, step) = match rest.split_once(':') {
            Some((e, s)) => (num(e)?, num(s)?),
            None => (num(rest)?, 1.0),
        };
        let start = num(start)?;
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(bad());
        }
        let n = ((end - start) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| start + i as f64 * step).collect());
    }
    let values: Vec<f64> = text.split(',').map(num).collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(bad());
    }
    Ok(values)
}

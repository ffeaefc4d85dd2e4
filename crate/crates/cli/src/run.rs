use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use anyhow::Context;
use kwf_rerank::dataset::load_features;
use kwf_rerank::index::{load_index, save_index};
use kwf_rerank::metrics::{query_eval_list, QueryScore, TimingSummary};
use kwf_rerank::pipeline::{write_dump, DumpRecord, StageTiming};
use kwf_rerank::{generate, Dataset, MetricsReport, NeighborIndex, Pipeline};
use serde::{Deserialize, Serialize};

use crate::args::{Axis, BenchArgs, BuildIndexArgs, EvalArgs, RunConfig, SweepArgs, SynthArgs};
use crate::{ConfigError, InvariantError};

/// Evaluation report: Stage-2 metrics at the top level, Stage-1 metrics and
/// the effective configuration alongside.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    pub stage1: MetricsReport,
    pub config: RunConfig,
}

struct Outcome {
    stage1: MetricsReport,
    stage2: MetricsReport,
    dump: Vec<DumpRecord>,
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let p = &cfg.paths;
    let ds = Dataset::load(
        &p.query_features,
        &p.query_meta,
        &p.gallery_features,
        &p.gallery_meta,
    )?;
    log::info!(
        "loaded {} queries, {} gallery rows, dim {}",
        ds.num_queries(),
        ds.num_gallery(),
        ds.dim()
    );
    Ok(ds)
}

fn execute(cfg: &RunConfig, ds: &Dataset, dump_depth: Option<usize>) -> anyhow::Result<Outcome> {
    let index = match &cfg.index_file {
        Some(path) => load_index(path, &ds.gallery_features)?,
        None => NeighborIndex::build(&ds.gallery_features, &cfg.options.index)?,
    };
    let pipeline = Pipeline::with_index(ds, index, cfg.options.kwf)?
        .with_method(cfg.options.method, cfg.options.qe)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .context("building worker pool")?;

    type PerQuery = (
        Option<QueryScore>,
        Option<QueryScore>,
        StageTiming,
        Option<DumpRecord>,
    );
    let start = Instant::now();
    let per_query: Vec<PerQuery> = pool.install(|| {
        pipeline.run_each(|r| {
            let q = &ds.query_meta[r.stage1.query_row];
            (
                query_eval_list(&r.stage1, q, &ds.gallery_meta),
                query_eval_list(&r.stage2, q, &ds.gallery_meta),
                r.timing,
                dump_depth.map(|d| DumpRecord::new(&r, ds, d)),
            )
        })
    })?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;

    let s1: Vec<_> = per_query.iter().map(|p| p.0).collect();
    let s2: Vec<_> = per_query.iter().map(|p| p.1).collect();
    let mut stage2 = MetricsReport::from_scores(&s2);
    stage2.timing = TimingSummary::from_timings(per_query.iter().map(|p| p.2), wall_ms);
    Ok(Outcome {
        stage1: MetricsReport::from_scores(&s1),
        stage2,
        dump: per_query.into_iter().filter_map(|p| p.3).collect(),
    })
}

fn report(cfg: &RunConfig, outcome: &Outcome) -> Report {
    Report {
        version: kwf_rerank::VERSION.to_string(),
        metrics: outcome.stage2.clone(),
        stage1: outcome.stage1.clone(),
        config: cfg.clone(),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = args.run.resolve()?;
    let ds = load_dataset(&cfg)?;
    let dump_depth = args.dump.as_ref().map(|_| args.dump_depth);
    let outcome = execute(&cfg, &ds, dump_depth)?;
    println!("Stage 1\n{}", outcome.stage1.render_table());
    println!(
        "Stage 2 ({:?})\n{}",
        cfg.options.method,
        outcome.stage2.render_table()
    );
    if let Some(path) = &args.out {
        write_json(path, &report(&cfg, &outcome))?;
    }
    if let Some(path) = &args.dump {
        write_dump(create(path)?, &outcome.dump)?;
    }
    Ok(())
}

fn integer_value(axis: &str, v: f64) -> Result<usize, ConfigError> {
    if v.fract() != 0.0 || v < 1.0 {
        return Err(ConfigError(format!(
            "{axis} values must be positive integers, got {v}"
        )));
    }
    Ok(v as usize)
}

pub fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let base = args.run.resolve()?;
    let values = crate::args::parse_values(&args.values)?;
    let ds = load_dataset(&base)?;
    let mut csv = String::from("value,rank1,map,mean_query_ms\n");
    for v in values {
        let mut cfg = base.clone();
        let label = match args.axis {
            Axis::K => {
                cfg.options.kwf.k = integer_value("k", v)?;
                format!("{}", cfg.options.kwf.k)
            }
            Axis::M => {
                cfg.options.kwf.m = integer_value("m", v)?;
                format!("{}", cfg.options.kwf.m)
            }
            Axis::Alpha => {
                cfg.options.kwf.alpha = v;
                format!("{v}")
            }
        };
        cfg.options.validate()?;
        let outcome = execute(&cfg, &ds, None)?;
        let m = &outcome.stage2;
        csv.push_str(&format!(
            "{label},{},{},{:.6}\n",
            m.rank1, m.map, m.timing.mean_query_ms
        ));
        log::info!("{label}: rank1 {:.4} map {:.4}", m.rank1, m.map);
        if let Some(dir) = &args.report_dir {
            let axis = format!("{:?}", args.axis).to_lowercase();
            write_json(
                &dir.join(format!("{axis}_{label}.json")),
                &report(&cfg, &outcome),
            )?;
        }
    }
    match &args.out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(csv.as_bytes())?;
            w.flush()?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn proc_status_kb(field: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    status
        .lines()
        .find_map(|l| l.strip_prefix(field))
        .and_then(|rest| rest.trim().trim_end_matches("kB").trim().parse().ok())
}

/// Resets the kernel's peak-RSS mark to the current RSS where supported.
fn reset_peak_rss() {
    let _ = std::fs::write("/proc/self/clear_refs", "5");
}

#[derive(Debug, Serialize)]
struct BenchReport {
    version: String,
    repeats: usize,
    wall_ms: Vec<f64>,
    wall_ms_mean: f64,
    wall_ms_std: f64,
    baseline_rss_bytes: Option<u64>,
    peak_rss_bytes: Option<u64>,
    metrics: MetricsReport,
    config: RunConfig,
}

fn same_metrics(a: &MetricsReport, b: &MetricsReport) -> bool {
    a.rank1 == b.rank1
        && a.map == b.map
        && a.cmc == b.cmc
        && a.evaluated == b.evaluated
        && a.skipped == b.skipped
}

pub fn bench(args: BenchArgs) -> anyhow::Result<()> {
    if args.repeats == 0 {
        return Err(ConfigError("--repeats must be >= 1".into()).into());
    }
    let cfg = args.run.resolve()?;
    let ds = load_dataset(&cfg)?;
    let mut walls = Vec::with_capacity(args.repeats);
    let mut peak: Option<u64> = None;
    let mut baseline: Option<u64> = None;
    let mut first: Option<MetricsReport> = None;
    for i in 0..args.repeats {
        reset_peak_rss();
        baseline = baseline.max(proc_status_kb("VmRSS:").map(|kb| kb * 1024));
        let start = Instant::now();
        let outcome = execute(&cfg, &ds, None)?;
        walls.push(start.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(proc_status_kb("VmHWM:").map(|kb| kb * 1024));
        match &first {
            None => first = Some(outcome.stage2),
            Some(f) if !same_metrics(f, &outcome.stage2) => {
                return Err(InvariantError(format!("repeat {i} produced different metrics")).into())
            }
            Some(_) => {}
        }
    }
    let n = walls.len() as f64;
    let mean = walls.iter().sum::<f64>() / n;
    let std = (walls.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / n).sqrt();
    let out = BenchReport {
        version: kwf_rerank::VERSION.to_string(),
        repeats: args.repeats,
        wall_ms: walls,
        wall_ms_mean: mean,
        wall_ms_std: std,
        baseline_rss_bytes: baseline,
        peak_rss_bytes: peak,
        metrics: first.expect("repeats >= 1"),
        config: cfg,
    };
    println!(
        "{} runs: wall {:.2} ms ± {:.2} ms, peak RSS {}",
        out.repeats,
        out.wall_ms_mean,
        out.wall_ms_std,
        out.peak_rss_bytes.map_or_else(
            || "n/a".to_string(),
            |b| format!("{:.1} MiB", b as f64 / 1048576.0)
        )
    );
    println!("{}", out.metrics.render_table());
    if let Some(path) = &args.out {
        write_json(path, &out)?;
    }
    Ok(())
}

pub fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = args.config();
    let ds = generate(&cfg)?;
    ds.save_dir(&args.out)?;
    write_json(&args.out.join("synth.json"), &cfg)?;
    println!(
        "wrote {} queries and {} gallery rows (dim {}) to {}",
        ds.num_queries(),
        ds.num_gallery(),
        ds.dim(),
        args.out.display()
    );
    Ok(())
}

pub fn build_index(args: BuildIndexArgs) -> anyhow::Result<()> {
    let gallery = load_features(args.input.gallery_features()?)?;
    let params = args.index.params();
    let start = Instant::now();
    let index = NeighborIndex::build(&gallery, &params)?;
    save_index(&args.out, &index)?;
    println!(
        "built {:?} index over {} rows in {:.1} ms -> {}",
        index.backend(),
        gallery.rows(),
        start.elapsed().as_secs_f64() * 1e3,
        args.out.display()
    );
    Ok(())
}

use std::collections::hash_map::DefaultHasher;
use std::fs;
use std::hash::{Hash, Hasher};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::Args;
use distknn::cluster::{Cluster, RankBuildReport};
use distknn::dist_query::{QueryBatch, QueryRun};
use distknn::harness::{self, BenchReport, DatasetKind, Environment, PointFormat};
use distknn::{seed, KnnResult, PointSet};

use crate::config::{CommonArgs, ReportFormat, RunConfig};
use crate::Failure;

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// uniform, gaussian-clusters, duplicate-heavy or anisotropic.
    #[arg(long, default_value = "uniform")]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 3)]
    dims: usize,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, default_value = "pkd1")]
    format: String,
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset file, or `gen:KIND:N:DIMS`.
    #[arg(long)]
    input: String,
    /// Where to write the tree bundle.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Tree bundle written by `build`.
    #[arg(long)]
    input: PathBuf,
    /// Query points (file or `gen:KIND:N:DIMS`); defaults to a sample of
    /// the bundle's points.
    #[arg(long)]
    queries: Option<String>,
    /// Results file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Dataset file or `gen:KIND:N:DIMS`. Built from scratch unless
    /// `--bundle` is given.
    #[arg(long)]
    input: Option<String>,
    /// Query a saved bundle instead of building.
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    queries: Option<String>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    input: String,
    #[arg(long)]
    queries: Option<String>,
    /// `KEY=V1,V2,...` with KEY one of workers, ranks, bucket-size,
    /// batch-size; repeat for a cross product.
    #[arg(long)]
    sweep: Vec<String>,
    /// Repetitions per sweep point; the median is reported.
    #[arg(long, default_value_t = 5)]
    reps: usize,
}

fn data_err(e: distknn::Error) -> Failure {
    Failure::data(e.to_string())
}

/// Loads a dataset file or generates one from `gen:KIND:N:DIMS`.
fn load_points(spec: &str, s: u64) -> Result<PointSet, Failure> {
    if let Some(rest) = spec.strip_prefix("gen:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let bad = || Failure::usage(format!("generator spec {spec:?} is not gen:KIND:N:DIMS"));
        let [kind, n, dims] = parts.as_slice() else {
            return Err(bad());
        };
        let kind: DatasetKind = kind.parse()?;
        let n = n.parse().map_err(|_| bad())?;
        let dims: usize = dims.parse().map_err(|_| bad())?;
        if dims == 0 {
            return Err(bad());
        }
        return Ok(harness::generate_dataset(kind, n, dims, s));
    }
    harness::read_points(Path::new(spec))
        .map(|(ps, _)| ps)
        .map_err(data_err)
}

fn load_queries(
    spec: Option<&str>,
    data: &PointSet,
    cfg: &RunConfig,
) -> Result<QueryBatch, Failure> {
    let qs = match spec {
        Some(spec) => load_points(spec, seed::derive(cfg.seed, 2))?,
        None => harness::sample_queries(data, cfg.query_fraction, seed::derive(cfg.seed, 3))?,
    };
    Ok(QueryBatch::from_points(&qs, cfg.k)?.with_batch_size(cfg.batch_size))
}

fn environment(cfg: &RunConfig, n: usize, dims: usize) -> Environment {
    Environment {
        workers: cfg.workers,
        ranks: cfg.ranks,
        n,
        dims,
        k: cfg.k,
        seed: cfg.seed,
        bucket_size: cfg.bucket_size,
        batch_size: cfg.batch_size,
    }
}

fn emit(report: &BenchReport, format: ReportFormat, to_stderr: bool) -> Result<(), Failure> {
    report.check().map_err(data_err)?;
    let text = match format {
        ReportFormat::Text => report.to_text(),
        ReportFormat::Records => report.to_jsonl(),
    };
    let res = if to_stderr {
        std::io::stderr().write_all(text.as_bytes())
    } else {
        std::io::stdout().write_all(text.as_bytes())
    };
    res.map_err(|e| Failure::data(e.to_string()))
}

fn build_cluster(
    data: &PointSet,
    cfg: &RunConfig,
) -> Result<(Cluster, Vec<RankBuildReport>, Duration), Failure> {
    if data.is_empty() {
        return Err(Failure::data("empty dataset"));
    }
    let started = Instant::now();
    let (cluster, reports) = Cluster::build(data, &cfg.cluster_config())?;
    Ok((cluster, reports, started.elapsed()))
}

fn run_queries(
    cluster: &Cluster,
    batch: &QueryBatch,
    cfg: &RunConfig,
) -> Result<(QueryRun, Duration), Failure> {
    if batch.is_empty() {
        return Ok((
            QueryRun {
                results: Vec::new(),
                errors: Vec::new(),
                reports: Vec::new(),
            },
            Duration::ZERO,
        ));
    }
    let started = Instant::now();
    let run = cluster.query(batch, &cfg.query_options())?;
    Ok((run, started.elapsed()))
}

/// Hash of every query's neighbor ids and distance bits, ignoring ranks.
pub fn result_hash(results: &[KnnResult]) -> u64 {
    let mut h = DefaultHasher::new();
    for r in results {
        r.query_id.hash(&mut h);
        for n in &r.neighbors {
            n.point_id.hash(&mut h);
            n.sq_dist.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

pub fn gen(a: GenArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve()?;
    let kind: DatasetKind = a.kind.parse()?;
    let format: PointFormat = a.format.parse()?;
    if a.dims == 0 {
        return Err(Failure::usage("--dims must be at least 1"));
    }
    let ps = harness::generate_dataset(kind, a.n, a.dims, cfg.seed);
    harness::write_points(&a.output, &ps, format, cfg.seed).map_err(data_err)?;
    eprintln!(
        "wrote {} {kind} points in {} dimensions to {}",
        ps.len(),
        ps.dims(),
        a.output.display()
    );
    Ok(())
}

pub fn build(a: BuildArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve()?;
    let data = load_points(&a.input, cfg.seed)?;
    let (cluster, reports, wall) = build_cluster(&data, &cfg)?;
    harness::write_bundle(&a.output, &cluster, cfg.seed).map_err(data_err)?;
    let mut report = BenchReport::new(environment(&cfg, data.len(), data.dims()));
    report.add_build(&reports, wall);
    emit(&report, cfg.report, false)
}

pub fn query(a: QueryArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve()?;
    let (cluster, _) = harness::read_bundle(&a.input).map_err(data_err)?;
    if cluster.ranks() != cfg.ranks && a.common.ranks.is_some() {
        return Err(Failure::usage(format!(
            "bundle was built for {} ranks, --ranks says {}",
            cluster.ranks(),
            cfg.ranks
        )));
    }
    let cfg = RunConfig {
        ranks: cluster.ranks(),
        ..cfg
    };
    let all = cluster.all_points();
    let batch = load_queries(a.queries.as_deref(), &all, &cfg)?;
    if let Some(q) = batch
        .queries
        .first()
        .filter(|q| q.point.len() != cluster.dims())
    {
        return Err(Failure::data(format!(
            "queries have {} dimensions, the bundle has {}",
            q.point.len(),
            cluster.dims()
        )));
    }
    let (run, wall) = run_queries(&cluster, &batch, &cfg)?;
    let text = harness::format_results(&run.results, &run.errors);
    match &a.output {
        Some(p) => {
            fs::write(p, text).map_err(|e| Failure::data(format!("{}: {e}", p.display())))?
        }
        None => print!("{text}"),
    }
    let mut report = BenchReport::new(environment(&cfg, all.len(), all.dims()));
    report.add_query(&run, wall);
    emit(&report, cfg.report, a.output.is_none())
}

pub fn verify(a: VerifyArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve()?;
    let data = a
        .input
        .as_deref()
        .map(|s| load_points(s, cfg.seed))
        .transpose()?;
    let (cluster, cfg) = match (&a.bundle, &data) {
        (Some(path), _) => {
            let (c, _) = harness::read_bundle(path).map_err(data_err)?;
            let ranks = c.ranks();
            (c, RunConfig { ranks, ..cfg })
        }
        (None, Some(d)) => (build_cluster(d, &cfg)?.0, cfg),
        (None, None) => return Err(Failure::usage("verify needs --input or --bundle")),
    };
    let data = data.unwrap_or_else(|| cluster.all_points());
    let batch = load_queries(a.queries.as_deref(), &data, &cfg)?;
    let (run, _) = run_queries(&cluster, &batch, &cfg)?;
    let oracle = harness::brute_force_batch(&data, &batch);
    let outcome = harness::verify_run(&run.results, &oracle, 0.0);
    println!("{outcome}");
    if outcome.passed() {
        Ok(())
    } else {
        Err(Failure {
            code: Failure::VERIFY,
            message: format!("{} mismatching queries", outcome.flagged.len()),
        })
    }
}

fn parse_sweep(specs: &[String]) -> Result<Vec<(String, Vec<usize>)>, Failure> {
    specs
        .iter()
        .map(|s| {
            let (key, values) = s
                .split_once('=')
                .ok_or_else(|| Failure::usage(format!("--sweep {s:?} is not KEY=V1,V2")))?;
            if !["workers", "ranks", "bucket-size", "batch-size"].contains(&key) {
                return Err(Failure::usage(format!("cannot sweep {key:?}")));
            }
            let values = values
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Failure::usage(format!("--sweep {key}: bad value {v:?}")))
                })
                .collect::<Result<Vec<usize>, _>>()?;
            Ok((key.to_string(), values))
        })
        .collect()
}

fn apply(cfg: &RunConfig, point: &[(String, usize)]) -> Result<RunConfig, Failure> {
    let mut c = cfg.clone();
    for (key, v) in point {
        match key.as_str() {
            "workers" => c.workers = *v,
            "ranks" => c.ranks = *v,
            "bucket-size" => c.bucket_size = *v,
            _ => c.batch_size = *v,
        }
    }
    c.validate()?;
    Ok(c)
}

pub fn bench(a: BenchArgs) -> Result<(), Failure> {
    let cfg = a.common.resolve()?;
    if a.reps == 0 {
        return Err(Failure::usage("--reps must be at least 1"));
    }
    let data = load_points(&a.input, cfg.seed)?;
    let sweep = parse_sweep(&a.sweep)?;
    let mut points: Vec<Vec<(String, usize)>> = vec![Vec::new()];
    for (key, values) in &sweep {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |&v| {
                    let mut p = p.clone();
                    p.push((key.clone(), v));
                    p
                })
            })
            .collect();
    }
    for point in points {
        let c = apply(&cfg, &point)?;
        let batch = load_queries(a.queries.as_deref(), &data, &c)?;
        let label = point
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect::<Vec<_>>()
            .join(",");

        let mut build_times = Vec::with_capacity(a.reps);
        let mut built = None;
        for _ in 0..a.reps {
            let (cluster, reports, wall) = build_cluster(&data, &c)?;
            build_times.push(wall);
            built = Some((cluster, reports, wall));
        }
        let (cluster, reports, _) = built.expect("at least one repetition");
        let build_wall = harness::median(&mut build_times);

        let mut query_times = Vec::with_capacity(a.reps);
        let mut last = None;
        for _ in 0..a.reps {
            let (run, wall) = run_queries(&cluster, &batch, &c)?;
            query_times.push(wall);
            last = Some(run);
        }
        let run = last.expect("at least one repetition");
        let query_wall = harness::median(&mut query_times);

        let mut report =
            BenchReport::new(environment(&c, data.len(), data.dims())).labelled(label.clone());
        report.add_build(&reports, build_wall);
        report.add_query(&run, query_wall);
        let hash = result_hash(&run.results);
        // 53 bits so the value survives as a JSON number
        report.counter("result_hash", (hash >> 11) as f64, "hash");
        if c.report == ReportFormat::Text {
            println!(
                "[{}] result hash {hash:016x}",
                if label.is_empty() { "default" } else { &label }
            );
        }
        emit(&report, c.report, false)?;
    }
    Ok(())
}

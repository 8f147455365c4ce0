//! Run configuration: flags override the key=value config file, which
//! overrides the defaults.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use clap::{Args, ValueEnum};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Records,
}

/// Options shared by every command. All are optional here so that a config
/// file can fill the gaps.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat key=value file; keys are the long flag names without dashes.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    /// Simulated ranks (power of two).
    #[arg(long)]
    pub ranks: Option<usize>,
    /// Threads per rank.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub bucket_size: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Share of the dataset sampled as queries when no query file is given.
    #[arg(long)]
    pub query_fraction: Option<f64>,
    /// Per-rank samples for global splits.
    #[arg(long)]
    pub global_sample: Option<usize>,
    /// Samples for local splits.
    #[arg(long)]
    pub local_sample: Option<usize>,
    /// Accept data that leaves some ranks without points.
    #[arg(long)]
    pub allow_empty_ranks: bool,
    /// Process query slices one after another.
    #[arg(long)]
    pub no_pipeline: bool,
    #[arg(long, value_enum)]
    pub report: Option<ReportFormat>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ranks: usize,
    pub workers: usize,
    pub k: usize,
    pub bucket_size: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub query_fraction: f64,
    pub global_sample: usize,
    pub local_sample: usize,
    pub allow_empty_ranks: bool,
    pub pipelined: bool,
    pub report: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            ranks: 1,
            workers: 1,
            k: 5,
            bucket_size: 32,
            batch_size: distknn::dist_query::DEFAULT_BATCH_SIZE,
            seed: 0,
            query_fraction: 0.10,
            global_sample: distknn::median::GLOBAL_SAMPLE_M,
            local_sample: distknn::median::LOCAL_SAMPLE_M,
            allow_empty_ranks: false,
            pipelined: true,
            report: ReportFormat::Text,
        }
    }
}

fn parse_file(text: &str) -> Result<HashMap<String, String>, Failure> {
    let mut map = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("config line {}: expected key=value", i + 1)))?;
        map.insert(key.trim().replace('_', "-"), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(
    map: &mut HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, Failure> {
    map.remove(key)
        .map(|v| {
            v.parse()
                .map_err(|_| Failure::usage(format!("config key {key}: cannot parse {v:?}")))
        })
        .transpose()
}

impl RunConfig {
    pub fn resolve(args: &CommonArgs) -> Result<Self, Failure> {
        let mut file = match &args.config {
            Some(p) => parse_file(&read_config(p)?)?,
            None => HashMap::new(),
        };
        let d = Self::default();
        let cfg = Self {
            ranks: args.ranks.or(take(&mut file, "ranks")?).unwrap_or(d.ranks),
            workers: args
                .workers
                .or(take(&mut file, "workers")?)
                .unwrap_or(d.workers),
            k: args.k.or(take(&mut file, "k")?).unwrap_or(d.k),
            bucket_size: args
                .bucket_size
                .or(take(&mut file, "bucket-size")?)
                .unwrap_or(d.bucket_size),
            batch_size: args
                .batch_size
                .or(take(&mut file, "batch-size")?)
                .unwrap_or(d.batch_size),
            seed: args.seed.or(take(&mut file, "seed")?).unwrap_or(d.seed),
            query_fraction: args
                .query_fraction
                .or(take(&mut file, "query-fraction")?)
                .unwrap_or(d.query_fraction),
            global_sample: args
                .global_sample
                .or(take(&mut file, "global-sample")?)
                .unwrap_or(d.global_sample),
            local_sample: args
                .local_sample
                .or(take(&mut file, "local-sample")?)
                .unwrap_or(d.local_sample),
            allow_empty_ranks: args.allow_empty_ranks
                || take(&mut file, "allow-empty-ranks")?.unwrap_or(d.allow_empty_ranks),
            pipelined: !args.no_pipeline && !take(&mut file, "no-pipeline")?.unwrap_or(false),
            report: match (args.report, file.remove("report")) {
                (Some(r), _) => r,
                (None, Some(v)) => ReportFormat::from_str(&v, true).map_err(|_| {
                    Failure::usage(format!("config key report: cannot parse {v:?}"))
                })?,
                (None, None) => d.report,
            },
        };
        if let Some(key) = file.keys().min() {
            return Err(Failure::usage(format!("unknown config key {key:?}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        if !self.ranks.is_power_of_two() {
            return Err(Failure::usage(format!(
                "--ranks must be a power of two, got {}",
                self.ranks
            )));
        }
        for (name, v) in [
            ("workers", self.workers),
            ("k", self.k),
            ("bucket-size", self.bucket_size),
            ("batch-size", self.batch_size),
            ("global-sample", self.global_sample),
            ("local-sample", self.local_sample),
        ] {
            if v == 0 {
                return Err(Failure::usage(format!("--{name} must be at least 1")));
            }
        }
        if !(0.0..=1.0).contains(&self.query_fraction) {
            return Err(Failure::usage("--query-fraction must be within [0, 1]"));
        }
        Ok(())
    }

    pub fn cluster_config(&self) -> distknn::cluster::ClusterConfig {
        distknn::cluster::ClusterConfig {
            ranks: self.ranks,
            global_sample_m: self.global_sample,
            local: distknn::BuildConfig {
                bucket_size: self.bucket_size,
                local_sample_m: self.local_sample,
                seed: self.seed,
                workers: self.workers,
                ..Default::default()
            },
            allow_empty_ranks: self.allow_empty_ranks,
        }
    }

    pub fn query_options(&self) -> distknn::dist_query::QueryOptions {
        distknn::dist_query::QueryOptions {
            workers: self.workers,
            pipelined: self.pipelined,
            trace: false,
        }
    }
}

fn read_config(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

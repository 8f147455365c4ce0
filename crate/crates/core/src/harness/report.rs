//! Benchmark records: one line-delimited JSON object per phase or counter.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cluster::RankBuildReport;
use crate::dist_query::QueryRun;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub workers: usize,
    pub ranks: usize,
    pub n: usize,
    pub dims: usize,
    pub k: usize,
    pub seed: u64,
    pub bucket_size: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordKind {
    Phase,
    Counter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub kind: RecordKind,
    pub name: String,
    pub value: f64,
    /// `"s"` for phases.
    pub unit: String,
    #[serde(flatten)]
    pub env: Environment,
    /// Free-form label for sweep points.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub label: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BenchReport {
    pub env: Environment,
    pub label: String,
    pub records: Vec<Record>,
}

fn mean<I: IntoIterator<Item = Duration>>(it: I, count: usize) -> Duration {
    let total: Duration = it.into_iter().sum();
    total / count.max(1) as u32
}

impl BenchReport {
    pub fn new(env: Environment) -> Self {
        Self {
            env,
            ..Default::default()
        }
    }

    pub fn labelled(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn phase(&mut self, name: &str, d: Duration) {
        self.push(RecordKind::Phase, name, d.as_secs_f64(), "s");
    }

    pub fn counter(&mut self, name: &str, value: f64, unit: &str) {
        self.push(RecordKind::Counter, name, value, unit);
    }

    fn push(&mut self, kind: RecordKind, name: &str, value: f64, unit: &str) {
        self.records.push(Record {
            kind,
            name: name.to_string(),
            value,
            unit: unit.to_string(),
            env: self.env.clone(),
            label: self.label.clone(),
        });
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .map(|r| r.value)
    }

    /// Construction phases, averaged over ranks, plus the wall time.
    pub fn add_build(&mut self, reports: &[RankBuildReport], wall: Duration) {
        let p = reports.len();
        self.phase(
            "construct.global",
            mean(reports.iter().map(|r| r.global_split), p),
        );
        self.phase(
            "construct.redistribute",
            mean(reports.iter().map(|r| r.redistribute), p),
        );
        self.phase(
            "construct.local",
            mean(reports.iter().map(|r| r.local_tree), p),
        );
        self.phase("construct.pack", mean(reports.iter().map(|r| r.pack), p));
        self.phase("construct.total", wall);
        let moved: u64 = reports.iter().map(|r| r.points_sent).sum();
        self.counter("points_moved", moved as f64, "points");
        let min = reports.iter().map(|r| r.final_points).min().unwrap_or(0);
        let max = reports.iter().map(|r| r.final_points).max().unwrap_or(0);
        self.counter("rank_points_min", min as f64, "points");
        self.counter("rank_points_max", max as f64, "points");
    }

    /// Query stages averaged over ranks, plus the wall time and counters.
    pub fn add_query(&mut self, run: &QueryRun, wall: Duration) {
        let p = run.reports.len().max(1) as u32;
        let t = run.timings();
        self.phase("query.find_owner", t.find_owner / p);
        self.phase("query.local_knn", t.local_knn / p);
        self.phase("query.remote_identify", t.identify / p);
        self.phase("query.remote_knn", t.remote_knn / p);
        self.phase("query.merge", t.merge / p);
        self.phase("query.comm", t.comm_wait / p);
        self.phase("query.total", wall);
        let c = run.counters();
        self.counter("queries", run.results.len() as f64, "queries");
        self.counter("query_errors", run.errors.len() as f64, "queries");
        self.counter("requests_sent", c.requests_sent as f64, "requests");
        self.counter("requests_received", c.requests_received as f64, "requests");
        self.counter(
            "queries_forwarded_pct",
            100.0 * run.forwarded_fraction(),
            "%",
        );
        let q = c.owned.max(1) as f64;
        let visits = c.local_visits.nodes_visited + c.remote_visits.nodes_visited;
        let compared = c.local_visits.points_compared + c.remote_visits.points_compared;
        self.counter("nodes_visited_per_query", visits as f64 / q, "nodes");
        self.counter("points_compared_per_query", compared as f64 / q, "points");
    }

    /// Timings are non-negative and every request sent was received.
    pub fn check(&self) -> Result<()> {
        if let Some(r) = self
            .records
            .iter()
            .find(|r| r.kind == RecordKind::Phase && !(r.value >= 0.0))
        {
            return Err(Error::Format(format!("negative timing for {}", r.name)));
        }
        match (self.get("requests_sent"), self.get("requests_received")) {
            (Some(s), Some(r)) if s != r => {
                Err(Error::Format(format!("{s} requests sent but {r} received")))
            }
            _ => Ok(()),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    /// Human-readable table; query phases also show their share of the
    /// summed query stages.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let e = &self.env;
        let _ = writeln!(
            s,
            "P={} workers={} n={} D={} k={} bucket={} batch={} seed={}",
            e.ranks, e.workers, e.n, e.dims, e.k, e.bucket_size, e.batch_size, e.seed
        );
        let stage_sum: f64 = self
            .records
            .iter()
            .filter(|r| {
                r.kind == RecordKind::Phase
                    && r.name.starts_with("query.")
                    && r.name != "query.total"
            })
            .map(|r| r.value)
            .sum();
        for r in &self.records {
            match r.kind {
                RecordKind::Phase
                    if r.name.starts_with("query.")
                        && r.name != "query.total"
                        && stage_sum > 0.0 =>
                {
                    let _ = writeln!(
                        s,
                        "  {:<28} {:>12.6} s  {:>5.1}%",
                        r.name,
                        r.value,
                        100.0 * r.value / stage_sum
                    );
                }
                RecordKind::Phase => {
                    let _ = writeln!(s, "  {:<28} {:>12.6} s", r.name, r.value);
                }
                RecordKind::Counter => {
                    let _ = writeln!(s, "  {:<28} {:>12.3} {}", r.name, r.value, r.unit);
                }
            }
        }
        s
    }
}

/// Runs `f` `reps` times and returns the median wall time with the last output.
pub fn time_median<T>(reps: usize, mut f: impl FnMut() -> T) -> (Duration, T) {
    assert!(reps >= 1);
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let started = Instant::now();
        last = Some(f());
        times.push(started.elapsed());
    }
    (median(&mut times), last.expect("at least one run"))
}

/// Median of the samples (lower middle for even counts).
pub fn median(samples: &mut [Duration]) -> Duration {
    assert!(!samples.is_empty());
    samples.sort_unstable();
    samples[(samples.len() - 1) / 2]
}

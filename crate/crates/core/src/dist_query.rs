//! The distributed query protocol.
//!
//! Per slice of the batch, every rank:
//! 1. routes the queries it ingested to their owners,
//! 2. answers its owned queries locally, which fixes `r'`,
//! 3. asks every rank whose region lies within `r'` for closer points,
//! 4. answers the requests it received, filtered by the sender's `r'`,
//! 5. merges the replies into the final top k.
//!
//! With pipelining on, slice `i + 1` is routed and searched locally before
//! the requests of slice `i` are answered.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{run_ranks, Cluster, MessageKind, RankState, Transport, TransportStats};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::local_query::{Searcher, VisitStats};
use crate::neighbor::{KnnResult, Neighbor};
use crate::points::PointSet;

pub const DEFAULT_BATCH_SIZE: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub point: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub queries: Vec<Query>,
    pub k: usize,
    pub batch_size: usize,
}

impl QueryBatch {
    /// Checks `k >= 1`, unique ids and finite coordinates. Dimensions are
    /// checked per query when the batch runs.
    pub fn new(queries: Vec<Query>, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::ZeroK);
        }
        let mut seen = HashSet::with_capacity(queries.len());
        for (row, q) in queries.iter().enumerate() {
            if !seen.insert(q.id) {
                return Err(Error::DuplicateId(q.id));
            }
            if let Some(dim) = q.point.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { row, dim });
            }
        }
        Ok(Self {
            queries,
            k,
            batch_size: DEFAULT_BATCH_SIZE,
        })
    }

    /// One query per point, keeping the point ids as query ids.
    pub fn from_points(points: &PointSet, k: usize) -> Result<Self> {
        let queries = (0..points.len())
            .map(|i| Query {
                id: points.ids()[i],
                point: points.row(i),
            })
            .collect();
        Self::new(queries, k)
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size;
        self
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn slices(&self, size: usize) -> Vec<Range<usize>> {
        let n = self.queries.len();
        (0..n.div_ceil(size))
            .map(|i| i * size..((i + 1) * size).min(n))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteRequest {
    pub query_id: u64,
    pub point: Vec<f64>,
    pub k: usize,
    pub sq_r_prime: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteResponse {
    pub query_id: u64,
    pub neighbors: Vec<Neighbor>,
}

/// `u32 k, point block of the queries (ids are query ids), f64 r' each`.
fn encode_requests(reqs: &[RemoteRequest], dims: usize) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(reqs.first().map_or(0, |r| r.k as u32));
    let rows: Vec<Vec<f64>> = reqs.iter().map(|r| r.point.clone()).collect();
    let ids = reqs.iter().map(|r| r.query_id).collect();
    let block =
        PointSet::from_rows_with_ids(dims, &rows, ids).expect("requests carry validated queries");
    w.point_block(&block);
    for r in reqs {
        w.f64(r.sq_r_prime);
    }
    w.finish()
}

fn decode_requests(bytes: &[u8]) -> Result<Vec<RemoteRequest>> {
    let mut r = Reader::new(bytes);
    let k = r.u32()? as usize;
    let block = r.point_block()?;
    let reqs = (0..block.len())
        .map(|i| {
            Ok(RemoteRequest {
                query_id: block.ids()[i],
                point: block.row(i),
                k,
                sq_r_prime: r.f64()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    Ok(reqs)
}

/// `u32 count`, then per response `u64 query id, u32 n` and
/// `(f64 sq_dist, u64 id, u32 rank)` per neighbor.
fn encode_responses(resps: &[RemoteResponse]) -> Vec<u8> {
    let mut w = Writer::new();
    w.u32(resps.len() as u32);
    for r in resps {
        w.u64(r.query_id);
        w.u32(r.neighbors.len() as u32);
        for n in &r.neighbors {
            w.f64(n.sq_dist);
            w.u64(n.point_id);
            w.u32(n.rank);
        }
    }
    w.finish()
}

fn decode_responses(bytes: &[u8]) -> Result<Vec<RemoteResponse>> {
    let mut r = Reader::new(bytes);
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(r.remaining() / 12));
    for _ in 0..count {
        let query_id = r.u64()?;
        let n = r.u32()? as usize;
        let neighbors = (0..n)
            .map(|_| Ok(Neighbor::new(r.f64()?, r.u64()?, r.u32()?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(RemoteResponse {
            query_id,
            neighbors,
        });
    }
    r.expect_end()?;
    Ok(out)
}

/// Merges the owner's result with remote replies and keeps the best `k`.
/// A point reported twice means two regions overlap, which is a bug.
pub fn merge_topk(local: KnnResult, responses: &[RemoteResponse], k: usize) -> Result<KnnResult> {
    if responses.is_empty() {
        return Ok(local);
    }
    let mut all = local.neighbors;
    all.extend(responses.iter().flat_map(|r| r.neighbors.iter().copied()));
    let mut seen = HashSet::with_capacity(all.len());
    if let Some(dup) = all.iter().find(|n| !seen.insert(n.point_id)) {
        return Err(Error::MergeDuplicate(dup.point_id));
    }
    Ok(KnnResult::from_unsorted(local.query_id, all, k))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryOptions {
    /// Threads per rank for local and remote searches.
    pub workers: usize,
    /// Overlap slice `i + 1`'s local search with slice `i`'s remote round.
    pub pipelined: bool,
    /// Record every forwarding decision.
    pub trace: bool,
}

impl Default for QueryOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            pipelined: true,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub find_owner: Duration,
    pub local_knn: Duration,
    /// Choosing remote ranks from `r'`.
    pub identify: Duration,
    pub remote_knn: Duration,
    pub merge: Duration,
    /// Time blocked on the transport.
    pub comm_wait: Duration,
    pub total: Duration,
}

impl StageTimings {
    pub fn add(&mut self, o: &StageTimings) {
        self.find_owner += o.find_owner;
        self.local_knn += o.local_knn;
        self.identify += o.identify;
        self.remote_knn += o.remote_knn;
        self.merge += o.merge;
        self.comm_wait += o.comm_wait;
        self.total += o.total;
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QueryCounters {
    pub ingested: u64,
    pub owned: u64,
    /// Owned queries sent to at least one other rank.
    pub forwarded: u64,
    /// Owned queries whose local search came back short of k.
    pub under_full: u64,
    pub requests_sent: u64,
    pub requests_received: u64,
    pub local_visits: VisitStats,
    pub remote_visits: VisitStats,
}

impl QueryCounters {
    pub fn add(&mut self, o: &QueryCounters) {
        self.ingested += o.ingested;
        self.owned += o.owned;
        self.forwarded += o.forwarded;
        self.under_full += o.under_full;
        self.requests_sent += o.requests_sent;
        self.requests_received += o.requests_received;
        self.local_visits.add(&o.local_visits);
        self.remote_visits.add(&o.remote_visits);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub query_id: u64,
    pub owner: usize,
    pub sq_r_prime: f64,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryError {
    pub query_id: u64,
    pub error: Error,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankQueryReport {
    pub timings: StageTimings,
    pub counters: QueryCounters,
    pub trace: Vec<ForwardRecord>,
    pub transport: TransportStats,
}

/// What one rank produced: results for the queries it owned and errors for
/// the queries it ingested but could not route.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankOutput {
    pub results: Vec<KnnResult>,
    pub errors: Vec<QueryError>,
    pub report: RankQueryReport,
}

/// Queries owned by this rank in one slice, after step 3.
struct InFlight {
    owned: Vec<Query>,
    local: Vec<KnnResult>,
    /// Per rank, indices into `owned` in request order.
    asked: Vec<Vec<usize>>,
}

struct Engine<'a, T: Transport> {
    t: &'a T,
    state: &'a RankState,
    batch: &'a QueryBatch,
    pool: rayon::ThreadPool,
    opts: QueryOptions,
    out: RankOutput,
}

impl<'a, T: Transport> Engine<'a, T> {
    fn new(
        t: &'a T,
        state: &'a RankState,
        batch: &'a QueryBatch,
        opts: QueryOptions,
    ) -> Result<Self> {
        if batch.k == 0 {
            return Err(Error::ZeroK);
        }
        if state.rank != t.rank() || state.global.ranks() != t.rank_count() {
            return Err(Error::Config(
                "rank state does not match the transport".into(),
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers.max(1))
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self {
            t,
            state,
            batch,
            pool,
            opts,
            out: RankOutput::default(),
        })
    }

    fn ranks(&self) -> usize {
        self.t.rank_count()
    }

    fn dims(&self) -> usize {
        self.state.global.dims()
    }

    fn encode_queries(&self, qs: &[&Query]) -> Vec<u8> {
        if qs.is_empty() {
            return Vec::new();
        }
        let rows: Vec<Vec<f64>> = qs.iter().map(|q| q.point.clone()).collect();
        let block =
            PointSet::from_rows_with_ids(self.dims(), &rows, qs.iter().map(|q| q.id).collect())
                .expect("batch queries are validated");
        let mut w = Writer::new();
        w.point_block(&block);
        w.finish()
    }

    /// Step 1: send ingested queries to their owners, receive owned ones.
    fn route(&mut self, slice: Range<usize>) -> Result<Vec<Query>> {
        let (me, p, dims) = (self.t.rank(), self.ranks(), self.dims());
        let started = Instant::now();
        let mut by_owner: Vec<Vec<&Query>> = vec![Vec::new(); p];
        for i in slice.filter(|i| i % p == me) {
            let q = &self.batch.queries[i];
            self.out.report.counters.ingested += 1;
            if q.point.len() != dims {
                self.out.errors.push(QueryError {
                    query_id: q.id,
                    error: Error::DimMismatch {
                        expected: dims,
                        got: q.point.len(),
                    },
                });
                continue;
            }
            by_owner[self.state.global.owner_of(&q.point)].push(q);
        }
        self.out.report.timings.find_owner += started.elapsed();

        let outgoing = by_owner.iter().map(|qs| self.encode_queries(qs)).collect();
        let mut owned = Vec::new();
        for payload in self.t.all_to_all(0..p, MessageKind::Queries, outgoing)? {
            if payload.is_empty() {
                continue;
            }
            let mut r = Reader::new(&payload);
            let block = r.point_block()?;
            r.expect_end()?;
            owned.extend((0..block.len()).map(|i| Query {
                id: block.ids()[i],
                point: block.row(i),
            }));
        }
        self.out.report.counters.owned += owned.len() as u64;
        Ok(owned)
    }

    fn search_all(&self, items: &[(&[f64], f64)]) -> Result<Vec<(KnnResult, VisitStats)>> {
        let (tree, k) = (&self.state.local, self.batch.k);
        self.pool.install(|| {
            items
                .par_iter()
                .map_init(Searcher::new, |s, &(q, r)| {
                    let mut stats = VisitStats::default();
                    let res = s.search(tree, q, k, r, &mut stats)?;
                    Ok((res, stats))
                })
                .collect()
        })
    }

    /// Steps 2 and 3: local search, then requests to ranks within `r'`.
    fn local_and_request(&mut self, owned: Vec<Query>) -> Result<InFlight> {
        let (me, p, k) = (self.t.rank(), self.ranks(), self.batch.k);
        let started = Instant::now();
        let items: Vec<(&[f64], f64)> = owned
            .iter()
            .map(|q| (q.point.as_slice(), f64::INFINITY))
            .collect();
        let found = self.search_all(&items)?;
        let mut local = Vec::with_capacity(found.len());
        for ((mut res, stats), q) in found.into_iter().zip(&owned) {
            self.out.report.counters.local_visits.add(&stats);
            res.query_id = q.id;
            res.set_rank(me as u32);
            local.push(res);
        }
        self.out.report.timings.local_knn += started.elapsed();

        let started = Instant::now();
        let mut asked: Vec<Vec<usize>> = vec![Vec::new(); p];
        for (i, (q, res)) in owned.iter().zip(&local).enumerate() {
            if res.neighbors.len() < k {
                self.out.report.counters.under_full += 1;
            }
            // An under-full result leaves r' infinite, which reaches every
            // rank with a non-empty region.
            let targets = self.state.global.ranks_within(&q.point, res.r_prime);
            if !targets.is_empty() {
                self.out.report.counters.forwarded += 1;
                self.out.report.counters.requests_sent += targets.len() as u64;
            }
            for &r in &targets {
                asked[r].push(i);
            }
            if self.opts.trace {
                self.out.report.trace.push(ForwardRecord {
                    query_id: q.id,
                    owner: me,
                    sq_r_prime: res.r_prime,
                    targets,
                });
            }
        }
        self.out.report.timings.identify += started.elapsed();

        let outgoing: Vec<Vec<u8>> = asked
            .iter()
            .map(|idx| {
                if idx.is_empty() {
                    return Vec::new();
                }
                let reqs: Vec<RemoteRequest> = idx
                    .iter()
                    .map(|&i| RemoteRequest {
                        query_id: owned[i].id,
                        point: owned[i].point.clone(),
                        k,
                        sq_r_prime: local[i].r_prime,
                    })
                    .collect();
                encode_requests(&reqs, self.dims())
            })
            .collect();
        let mut outgoing = outgoing;
        self.t.scatter(0..p, MessageKind::Requests, &mut outgoing)?;
        Ok(InFlight {
            owned,
            local,
            asked,
        })
    }

    /// Step 4: answer every request received for the current slice.
    fn answer(&mut self) -> Result<()> {
        let (me, p, k) = (self.t.rank(), self.ranks(), self.batch.k);
        let incoming = self.t.collect(0..p, MessageKind::Requests, Vec::new())?;
        let mut per_sender = Vec::with_capacity(p);
        for payload in &incoming {
            per_sender.push(if payload.is_empty() {
                Vec::new()
            } else {
                decode_requests(payload)?
            });
        }
        let started = Instant::now();
        let dims = self.dims();
        let mut items = Vec::new();
        for req in per_sender.iter().flatten() {
            if req.point.len() != dims || req.k != k || req.sq_r_prime.is_nan() {
                return Err(Error::Transport(format!(
                    "malformed request for query {}",
                    req.query_id
                )));
            }
            items.push((req.point.as_slice(), req.sq_r_prime));
        }
        self.out.report.counters.requests_received += items.len() as u64;
        let found = self.search_all(&items)?;
        self.out.report.timings.remote_knn += started.elapsed();

        let mut found = found.into_iter();
        let mut outgoing = Vec::with_capacity(p);
        for reqs in &per_sender {
            if reqs.is_empty() {
                outgoing.push(Vec::new());
                continue;
            }
            let resps: Vec<RemoteResponse> = reqs
                .iter()
                .map(|req| {
                    let (mut res, stats) = found.next().expect("one result per request");
                    self.out.report.counters.remote_visits.add(&stats);
                    res.set_rank(me as u32);
                    RemoteResponse {
                        query_id: req.query_id,
                        neighbors: res.neighbors,
                    }
                })
                .collect();
            outgoing.push(encode_responses(&resps));
        }
        self.t.scatter(0..p, MessageKind::Responses, &mut outgoing)
    }

    /// Step 5: merge replies into the owned queries' results.
    fn collect(&mut self, flight: InFlight) -> Result<()> {
        let (p, k) = (self.ranks(), self.batch.k);
        let incoming = self.t.collect(0..p, MessageKind::Responses, Vec::new())?;
        let mut replies: Vec<Vec<RemoteResponse>> = vec![Vec::new(); flight.owned.len()];
        for (from, payload) in incoming.iter().enumerate() {
            let asked = &flight.asked[from];
            let resps = if payload.is_empty() {
                Vec::new()
            } else {
                decode_responses(payload)?
            };
            if resps.len() != asked.len() {
                return Err(Error::Transport(format!(
                    "rank {from} answered {} of {} requests",
                    resps.len(),
                    asked.len()
                )));
            }
            for (resp, &i) in resps.into_iter().zip(asked) {
                let r_prime = flight.local[i].r_prime;
                if resp.query_id != flight.owned[i].id
                    || resp.neighbors.len() > k
                    || resp.neighbors.iter().any(|n| !(n.sq_dist < r_prime))
                {
                    return Err(Error::Transport(format!(
                        "rank {from} sent an invalid response for query {}",
                        flight.owned[i].id
                    )));
                }
                replies[i].push(resp);
            }
        }
        let started = Instant::now();
        for (local, resps) in flight.local.into_iter().zip(&replies) {
            self.out.results.push(merge_topk(local, resps, k)?);
        }
        self.out.report.timings.merge += started.elapsed();
        Ok(())
    }

    fn run(mut self, slices: Vec<Range<usize>>, pipelined: bool) -> Result<RankOutput> {
        let started = Instant::now();
        let wait_before = self.t.stats().wait;
        if pipelined {
            let mut ahead = None;
            if let Some(first) = slices.first() {
                let owned = self.route(first.clone())?;
                ahead = Some(self.local_and_request(owned)?);
            }
            for i in 0..slices.len() {
                let current = ahead.take().expect("slice in flight");
                if let Some(next) = slices.get(i + 1) {
                    let owned = self.route(next.clone())?;
                    ahead = Some(self.local_and_request(owned)?);
                }
                self.answer()?;
                self.collect(current)?;
            }
        } else {
            for s in slices {
                let owned = self.route(s)?;
                let flight = self.local_and_request(owned)?;
                self.answer()?;
                self.collect(flight)?;
            }
        }
        let stats = self.t.stats();
        self.out.report.timings.comm_wait = stats.wait - wait_before;
        self.out.report.timings.total = started.elapsed();
        self.out.report.transport = stats;
        Ok(self.out)
    }
}

/// The whole batch as one slice, run by the calling rank.
pub fn distributed_knn<T: Transport>(
    t: &T,
    state: &RankState,
    batch: &QueryBatch,
    opts: &QueryOptions,
) -> Result<RankOutput> {
    let engine = Engine::new(t, state, batch, *opts)?;
    let slices = batch.slices(batch.len().max(1));
    engine.run(slices, false)
}

/// The batch in slices of `batch.batch_size`, overlapped when
/// `opts.pipelined` is set. Results equal [`distributed_knn`]'s.
pub fn run_pipelined<T: Transport>(
    t: &T,
    state: &RankState,
    batch: &QueryBatch,
    opts: &QueryOptions,
) -> Result<RankOutput> {
    if batch.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let engine = Engine::new(t, state, batch, *opts)?;
    engine.run(batch.slices(batch.batch_size), opts.pipelined)
}

/// Results of a whole batch across all ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRun {
    /// One per successfully routed query, in batch order.
    pub results: Vec<KnnResult>,
    /// Queries rejected at ingestion, in batch order.
    pub errors: Vec<QueryError>,
    pub reports: Vec<RankQueryReport>,
}

impl QueryRun {
    fn assemble(batch: &QueryBatch, outputs: Vec<RankOutput>) -> Self {
        let pos: HashMap<u64, usize> = batch
            .queries
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id, i))
            .collect();
        let mut results = Vec::new();
        let mut errors = Vec::new();
        let mut reports = Vec::new();
        for o in outputs {
            results.extend(o.results);
            errors.extend(o.errors);
            reports.push(o.report);
        }
        results.sort_by_key(|r| pos[&r.query_id]);
        errors.sort_by_key(|e| pos[&e.query_id]);
        Self {
            results,
            errors,
            reports,
        }
    }

    pub fn timings(&self) -> StageTimings {
        let mut t = StageTimings::default();
        for r in &self.reports {
            t.add(&r.timings);
        }
        t
    }

    pub fn counters(&self) -> QueryCounters {
        let mut c = QueryCounters::default();
        for r in &self.reports {
            c.add(&r.counters);
        }
        c
    }

    /// Fraction of owned queries sent to at least one other rank.
    pub fn forwarded_fraction(&self) -> f64 {
        let c = self.counters();
        if c.owned == 0 {
            0.0
        } else {
            c.forwarded as f64 / c.owned as f64
        }
    }

    pub fn trace(&self) -> impl Iterator<Item = &ForwardRecord> {
        self.reports.iter().flat_map(|r| r.trace.iter())
    }
}

impl Cluster {
    /// Runs the batch on every rank with [`run_pipelined`].
    pub fn query(&self, batch: &QueryBatch, opts: &QueryOptions) -> Result<QueryRun> {
        let outputs = run_ranks(self.ranks(), |t| {
            run_pipelined(t, &self.states()[t.rank()], batch, opts)
        })?;
        Ok(QueryRun::assemble(batch, outputs))
    }

    /// Runs the batch on every rank with [`distributed_knn`].
    pub fn query_unsliced(&self, batch: &QueryBatch, opts: &QueryOptions) -> Result<QueryRun> {
        let outputs = run_ranks(self.ranks(), |t| {
            distributed_knn(t, &self.states()[t.rank()], batch, opts)
        })?;
        Ok(QueryRun::assemble(batch, outputs))
    }
}

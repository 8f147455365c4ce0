//! The simulated cluster: ranks, their transport, the replicated global
//! tree and the construction protocol that spreads points across ranks.

mod build;
mod global_tree;
mod transport;

use std::time::{Duration, Instant};

pub use build::{
    build_global_tree, choose_global_split_dimension, redistribute, ClusterConfig,
    GlobalBuildStats, RedistributeStats,
};
pub use global_tree::GlobalTree;
pub use transport::{run_ranks, Frame, InMemoryTransport, MessageKind, Transport, TransportStats};

use crate::error::{Error, Result};
use crate::geometry::Region;
use crate::local_tree::{build_local_tree_timed, LocalTree};
use crate::points::PointSet;
use crate::seed;

/// Everything one rank holds after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RankState {
    pub rank: usize,
    pub global: GlobalTree,
    pub local: LocalTree,
}

impl RankState {
    pub fn region(&self) -> &Region {
        self.global.region(self.rank)
    }

    /// This rank's points, in bucket order.
    pub fn points(&self) -> &PointSet {
        self.local.points()
    }

    /// Every local point lies in this rank's region.
    pub fn check_region(&self) -> Result<()> {
        let pts = self.points();
        let mut row = vec![0.0; pts.dims()];
        for i in 0..pts.len() {
            pts.row_into(i, &mut row);
            if !self.region().contains(&row) {
                return Err(Error::Format(format!(
                    "point {} lies outside rank {}'s region",
                    pts.ids()[i],
                    self.rank
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RankBuildReport {
    pub global_split: Duration,
    pub redistribute: Duration,
    pub local_tree: Duration,
    pub pack: Duration,
    pub total: Duration,
    pub points_sent: u64,
    pub points_received: u64,
    pub final_points: u64,
    pub transport: TransportStats,
}

/// Builds the calling rank's share of the two-tier tree from its initial points.
pub fn build_rank<T: Transport>(
    t: &T,
    points: PointSet,
    cfg: &ClusterConfig,
) -> Result<(RankState, RankBuildReport)> {
    let started = Instant::now();
    let (global, points, gs) = build_global_tree(t, points, cfg)?;
    let mut local_cfg = cfg.local.clone();
    local_cfg.seed = seed::derive(cfg.local.seed, 1 + t.rank() as u64);
    let (local, lt) = build_local_tree_timed(&points, &local_cfg)?;
    let report = RankBuildReport {
        global_split: gs.split,
        redistribute: gs.redistribute,
        local_tree: lt.tree,
        pack: lt.pack,
        total: started.elapsed(),
        points_sent: gs.points_sent,
        points_received: gs.points_received,
        final_points: local.len() as u64,
        transport: t.stats(),
    };
    Ok((
        RankState {
            rank: t.rank(),
            global,
            local,
        },
        report,
    ))
}

/// All ranks of an in-process cluster, built and ready to query.
#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    states: Vec<RankState>,
}

impl Cluster {
    /// Splits `points` into contiguous chunks, one initial chunk per rank,
    /// and runs construction on every rank.
    pub fn build(points: &PointSet, cfg: &ClusterConfig) -> Result<(Self, Vec<RankBuildReport>)> {
        cfg.validate()?;
        let p = cfg.ranks;
        let n = points.len();
        let parts = (0..p)
            .map(|i| {
                let rows: Vec<u32> = (n * i / p..n * (i + 1) / p).map(|r| r as u32).collect();
                points.gather(&rows)
            })
            .collect();
        Self::build_partitioned(parts, cfg)
    }

    /// Construction from an explicit initial placement, `parts[r]` on rank `r`.
    pub fn build_partitioned(
        parts: Vec<PointSet>,
        cfg: &ClusterConfig,
    ) -> Result<(Self, Vec<RankBuildReport>)> {
        cfg.validate()?;
        if parts.len() != cfg.ranks {
            return Err(Error::Config(format!(
                "{} parts for {} ranks",
                parts.len(),
                cfg.ranks
            )));
        }
        if let Some(p) = parts.iter().find(|p| p.dims() != parts[0].dims()) {
            return Err(Error::DimMismatch {
                expected: parts[0].dims(),
                got: p.dims(),
            });
        }
        let slots: Vec<std::sync::Mutex<Option<PointSet>>> = parts
            .into_iter()
            .map(|p| std::sync::Mutex::new(Some(p)))
            .collect();
        let out = run_ranks(cfg.ranks, |t| {
            let mine = slots[t.rank()]
                .lock()
                .expect("slot lock")
                .take()
                .expect("taken once");
            build_rank(t, mine, cfg)
        })?;
        let (states, reports) = out.into_iter().unzip();
        Ok((Self { states }, reports))
    }

    /// Reassembles a cluster from saved rank states, checking consistency.
    pub fn from_states(states: Vec<RankState>) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::Format("no ranks".into()))?;
        if first.global.ranks() != states.len() {
            return Err(Error::Format(format!(
                "global tree has {} ranks but {} states were given",
                first.global.ranks(),
                states.len()
            )));
        }
        for (r, s) in states.iter().enumerate() {
            if s.rank != r || s.global != first.global || s.local.dims() != first.global.dims() {
                return Err(Error::Format(format!(
                    "rank {r} is inconsistent with rank 0"
                )));
            }
            s.check_region()?;
        }
        Ok(Self { states })
    }

    pub fn ranks(&self) -> usize {
        self.states.len()
    }

    pub fn dims(&self) -> usize {
        self.states[0].global.dims()
    }

    pub fn len(&self) -> usize {
        self.states.iter().map(|s| s.local.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn global(&self) -> &GlobalTree {
        &self.states[0].global
    }

    pub fn states(&self) -> &[RankState] {
        &self.states
    }

    pub fn into_states(self) -> Vec<RankState> {
        self.states
    }

    /// Union of all ranks' points.
    pub fn all_points(&self) -> PointSet {
        let mut all = PointSet::empty(self.dims());
        for s in &self.states {
            all.append(s.points());
        }
        all
    }
}

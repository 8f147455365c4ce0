//! Neighbor records and per-query results.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub sq_dist: f64,
    pub point_id: u64,
    pub rank: u32,
}

impl Neighbor {
    pub fn new(sq_dist: f64, point_id: u64, rank: u32) -> Self {
        Self {
            sq_dist,
            point_id,
            rank,
        }
    }

    /// Total order by `(sq_dist, point_id)`.
    #[inline]
    pub fn key_cmp(&self, other: &Self) -> Ordering {
        self.sq_dist
            .total_cmp(&other.sq_dist)
            .then(self.point_id.cmp(&other.point_id))
    }
}

/// Up to `k` neighbors of one query, sorted by `(sq_dist, point_id)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnResult {
    pub query_id: u64,
    pub neighbors: Vec<Neighbor>,
    /// Squared distance of the k-th neighbor, or `+inf` while fewer than k are held.
    pub r_prime: f64,
}

impl KnnResult {
    /// Sorts `neighbors`, keeps the first `k` and derives `r_prime`.
    pub fn from_unsorted(query_id: u64, mut neighbors: Vec<Neighbor>, k: usize) -> Self {
        neighbors.sort_by(Neighbor::key_cmp);
        neighbors.truncate(k);
        neighbors.shrink_to_fit();
        let r_prime = if neighbors.len() == k && k > 0 {
            neighbors[k - 1].sq_dist
        } else {
            f64::INFINITY
        };
        Self {
            query_id,
            neighbors,
            r_prime,
        }
    }

    pub fn empty(query_id: u64) -> Self {
        Self {
            query_id,
            neighbors: Vec::new(),
            r_prime: f64::INFINITY,
        }
    }

    pub fn distances(&self) -> Vec<f64> {
        self.neighbors.iter().map(|n| n.sq_dist).collect()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.neighbors.iter().map(|n| n.point_id).collect()
    }

    pub fn set_rank(&mut self, rank: u32) {
        for n in &mut self.neighbors {
            n.rank = rank;
        }
    }
}

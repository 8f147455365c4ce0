//! Exact k-nearest-neighbor search over a two-tier kd-tree.
//!
//! A replicated global tree of `log2(P)` levels assigns every rank a
//! disjoint axis-aligned region; each rank indexes its own points with a
//! bucketed local kd-tree. Queries go to the rank owning their region, are
//! answered locally, and are forwarded only to ranks whose region lies
//! within the current k-th neighbor distance.
//!
//! Ranks are simulated in-process and talk exclusively through a
//! [`cluster::Transport`], so the whole protocol runs and can be checked
//! against [`harness::brute_force_knn`] on a single machine.

pub mod cluster;
pub mod dist_query;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod local_query;
pub mod local_tree;
pub mod median;
pub mod neighbor;
pub mod points;
pub mod seed;

mod codec;

pub use error::{Error, Result};
pub use geometry::{min_sq_dist_to_region, squared_distance, Region, SplitPlane};
pub use local_query::{count_visited, find_knn, VisitStats};
pub use local_tree::{build_local_tree, BuildConfig, LocalTree};
pub use neighbor::{KnnResult, Neighbor};
pub use points::PointSet;

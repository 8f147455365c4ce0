use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::points::PointSet;
use crate::seed;

pub const CLUSTER_CENTERS: usize = 4;
const CLUSTER_SIGMA: f64 = 0.03;
/// Shared positions used by the duplicate-heavy kind.
const ANCHORS: usize = 8;
const DUPLICATE_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Independent uniform coordinates in `[0, 1)`.
    Uniform,
    /// Normal blobs around [`cluster_centers`].
    GaussianClusters,
    /// 40% of the points stacked on a few anchors, the rest uniform.
    DuplicateHeavy,
    /// Uniform, with dimension `d` stretched by `100 * 0.1^d`.
    Anisotropic,
}

impl DatasetKind {
    pub const ALL: [DatasetKind; 4] = [
        DatasetKind::Uniform,
        DatasetKind::GaussianClusters,
        DatasetKind::DuplicateHeavy,
        DatasetKind::Anisotropic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::GaussianClusters => "gaussian-clusters",
            Self::DuplicateHeavy => "duplicate-heavy",
            Self::Anisotropic => "anisotropic",
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown dataset kind {s:?}")))
    }
}

/// Centers of the gaussian-clusters kind, pairwise at least 0.3 apart when
/// `dims` allows it.
pub fn cluster_centers(dims: usize, s: u64) -> Vec<Vec<f64>> {
    let mut rng = seed::rng(seed::derive(s, 0x63656e74));
    let mut centers: Vec<Vec<f64>> = Vec::new();
    let mut tries = 0;
    while centers.len() < CLUSTER_CENTERS {
        let c: Vec<f64> = (0..dims).map(|_| rng.random_range(0.1..0.9)).collect();
        tries += 1;
        let far = centers
            .iter()
            .all(|o| crate::squared_distance(o, &c) >= 0.09);
        if far || tries > 1000 {
            centers.push(c);
        }
    }
    centers
}

/// Deterministic synthetic points with ids `0..n`.
pub fn generate_dataset(kind: DatasetKind, n: usize, dims: usize, s: u64) -> PointSet {
    assert!(dims > 0, "dims must be positive");
    let mut rng = seed::rng(s);
    let mut rows: Vec<Vec<f64>> = match kind {
        DatasetKind::Uniform => (0..n)
            .map(|_| (0..dims).map(|_| rng.random()).collect())
            .collect(),
        DatasetKind::Anisotropic => (0..n)
            .map(|_| {
                (0..dims)
                    .map(|d| rng.random::<f64>() * 100.0 * 0.1f64.powi(d as i32))
                    .collect()
            })
            .collect(),
        DatasetKind::GaussianClusters => {
            let centers = cluster_centers(dims, s);
            let noise = Normal::new(0.0, CLUSTER_SIGMA).expect("valid sigma");
            (0..n)
                .map(|_| {
                    let c = &centers[rng.random_range(0..CLUSTER_CENTERS)];
                    c.iter().map(|&x| x + noise.sample(&mut rng)).collect()
                })
                .collect()
        }
        DatasetKind::DuplicateHeavy => {
            let anchors: Vec<Vec<f64>> = (0..ANCHORS)
                .map(|_| (0..dims).map(|_| rng.random()).collect())
                .collect();
            let dup = (n as f64 * DUPLICATE_FRACTION).ceil() as usize;
            let mut rows: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    if i < dup {
                        anchors[rng.random_range(0..ANCHORS)].clone()
                    } else {
                        (0..dims).map(|_| rng.random()).collect()
                    }
                })
                .collect();
            rows.shuffle(&mut rng);
            rows
        }
    };
    if n == 0 {
        rows.clear();
    }
    PointSet::from_rows(dims, &rows).expect("generated coordinates are finite")
}

/// A `fraction` of the dataset's points, chosen without replacement and
/// kept in dataset order; ids are preserved.
pub fn sample_queries(points: &PointSet, fraction: f64, s: u64) -> Result<PointSet> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "query fraction {fraction} is outside [0, 1]"
        )));
    }
    let m = (points.len() as f64 * fraction).round() as usize;
    let mut rows: Vec<u32> = crate::median::sample_indices(points.len(), m, s)
        .into_iter()
        .map(|i| i as u32)
        .collect();
    rows.sort_unstable();
    Ok(points.gather(&rows))
}

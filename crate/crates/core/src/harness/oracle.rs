use rayon::prelude::*;

use crate::dist_query::QueryBatch;
use crate::geometry::squared_distance;
use crate::neighbor::{KnnResult, Neighbor};
use crate::points::PointSet;

/// Linear-scan k-NN: every point with `sq_dist < sq_r` (all points when
/// `sq_r` is `None`), best `k` by `(sq_dist, point_id)`. Ranks are 0.
pub fn brute_force_knn(points: &PointSet, q: &[f64], k: usize, sq_r: Option<f64>) -> KnnResult {
    assert!(k >= 1, "k must be positive");
    assert_eq!(q.len(), points.dims(), "query dimensionality");
    let r = sq_r.unwrap_or(f64::INFINITY);
    let mut row = vec![0.0; points.dims()];
    let mut found: Vec<Neighbor> = Vec::new();
    for (i, &id) in points.ids().iter().enumerate() {
        points.row_into(i, &mut row);
        let d = squared_distance(&row, q);
        if d < r {
            found.push(Neighbor::new(d, id, 0));
        }
    }
    if found.len() > k {
        found.select_nth_unstable_by(k - 1, Neighbor::key_cmp);
        found.truncate(k);
    }
    KnnResult::from_unsorted(0, found, k)
}

/// Oracle answers for every query of the batch with matching
/// dimensionality, in batch order.
pub fn brute_force_batch(points: &PointSet, batch: &QueryBatch) -> Vec<KnnResult> {
    batch
        .queries
        .par_iter()
        .filter(|q| q.point.len() == points.dims())
        .map(|q| {
            let mut r = brute_force_knn(points, &q.point, batch.k, None);
            r.query_id = q.id;
            r
        })
        .collect()
}

use std::collections::BTreeMap;
use std::fmt;

use crate::neighbor::KnnResult;

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub query_id: u64,
    pub engine: Option<Vec<f64>>,
    pub oracle: Option<Vec<f64>>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    /// Distinct query ids seen on either side.
    pub checked: usize,
    /// Failing query ids, ascending.
    pub flagged: Vec<u64>,
    /// The failing query with the smallest id.
    pub first: Option<Mismatch>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.flagged.is_empty()
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.first {
            None => write!(f, "PASS: {} queries match", self.checked),
            Some(m) => {
                write!(
                    f,
                    "FAIL: {} of {} queries differ; first is query {}: {}",
                    self.flagged.len(),
                    self.checked,
                    m.query_id,
                    m.reason
                )?;
                if let Some(e) = &m.engine {
                    write!(f, "\n  engine: {e:?}")?;
                }
                if let Some(o) = &m.oracle {
                    write!(f, "\n  oracle: {o:?}")?;
                }
                Ok(())
            }
        }
    }
}

fn compare(a: &[f64], b: &[f64], tolerance: f64) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("count mismatch: {} vs {}", a.len(), b.len()));
    }
    a.iter().zip(b).enumerate().find_map(|(i, (x, y))| {
        let same = if tolerance == 0.0 {
            x == y
        } else {
            (x - y).abs() <= tolerance
        };
        (!same).then(|| format!("neighbor {i}: {x:?} vs {y:?}"))
    })
}

/// Compares the sorted squared-distance lists of each query id. With
/// `tolerance == 0` distances must be equal exactly.
pub fn verify_run(engine: &[KnnResult], oracle: &[KnnResult], tolerance: f64) -> VerifyReport {
    let by_id = |rs: &[KnnResult]| -> BTreeMap<u64, Vec<f64>> {
        rs.iter()
            .map(|r| {
                let mut d = r.distances();
                d.sort_by(f64::total_cmp);
                (r.query_id, d)
            })
            .collect()
    };
    let e = by_id(engine);
    let o = by_id(oracle);
    let mut ids: Vec<u64> = e.keys().chain(o.keys()).copied().collect();
    ids.sort_unstable();
    ids.dedup();
    let mut flagged = Vec::new();
    let mut first = None;
    for &id in &ids {
        let reason = match (e.get(&id), o.get(&id)) {
            (Some(a), Some(b)) => compare(a, b, tolerance),
            (None, _) => Some("missing from engine results".to_string()),
            (_, None) => Some("missing from oracle results".to_string()),
        };
        if let Some(reason) = reason {
            flagged.push(id);
            if first.is_none() {
                first = Some(Mismatch {
                    query_id: id,
                    engine: e.get(&id).cloned(),
                    oracle: o.get(&id).cloned(),
                    reason,
                });
            }
        }
    }
    VerifyReport {
        checked: ids.len(),
        flagged,
        first,
    }
}

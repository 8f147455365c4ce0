//! Dataset, tree bundle and result files.
//!
//! Binary files are little-endian. A dataset file is
//! `"PKD1", u32 dims, u64 count, u64 seed, u64 ids[count], f64 coords[dims][count]`
//! (column-major). A tree bundle starts with `"PKT1", u64 seed`, then the
//! global tree and one block per rank.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::cluster::{Cluster, GlobalTree, RankState};
use crate::codec::{Reader, Writer};
use crate::dist_query::QueryError;
use crate::error::{Error, Result};
use crate::geometry::SplitPlane;
use crate::local_tree::{Bucket, Interior, LocalTree, NodeRef};
use crate::neighbor::KnnResult;
use crate::points::PointSet;

pub const DATASET_MAGIC: &[u8; 4] = b"PKD1";
pub const BUNDLE_MAGIC: &[u8; 4] = b"PKT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointFormat {
    Pkd1,
    Csv,
}

impl FromStr for PointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pkd1" => Ok(Self::Pkd1),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!(
                "unknown format {s:?}, expected pkd1 or csv"
            ))),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

pub fn encode_pkd1(points: &PointSet, seed: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(DATASET_MAGIC);
    w.u32(points.dims() as u32);
    w.u64(points.len() as u64);
    w.u64(seed);
    w.ids_and_columns(points);
    w.finish()
}

/// Points and the seed recorded in the header.
pub fn decode_pkd1(bytes: &[u8]) -> Result<(PointSet, u64)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != DATASET_MAGIC {
        return Err(Error::Format("not a PKD1 file (bad magic)".into()));
    }
    let dims = r.u32()? as usize;
    let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count too large".into()))?;
    let seed = r.u64()?;
    let points = r.ids_and_columns(dims, count)?;
    r.expect_end()?;
    Ok((points, seed))
}

/// One point per line. A first line that does not parse as numbers is a
/// header; if its first field is `id`, the first column holds point ids,
/// otherwise ids are assigned `0..n`.
pub fn parse_csv(text: &str) -> Result<PointSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
        .peekable();
    let mut has_id = false;
    if let Some((_, first)) = lines.peek() {
        let numeric = first.split(',').all(|f| f.trim().parse::<f64>().is_ok());
        if !numeric {
            has_id = first
                .split(',')
                .next()
                .is_some_and(|f| f.trim().eq_ignore_ascii_case("id"));
            lines.next();
        }
    }
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    let mut dims = None;
    for (line_no, line) in lines {
        let mut fields = line.split(',').map(str::trim);
        if has_id {
            let f = fields.next().unwrap_or("");
            ids.push(
                f.parse::<u64>()
                    .map_err(|_| Error::Format(format!("line {line_no}: bad id {f:?}")))?,
            );
        } else {
            ids.push(rows.len() as u64);
        }
        let row = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::Format(format!("line {line_no}: bad coordinate {f:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        match dims {
            None => dims = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(Error::Format(format!(
                    "line {line_no}: {} coordinates, expected {d}",
                    row.len()
                )))
            }
            _ => {}
        }
        rows.push(row);
    }
    let dims = dims.ok_or(Error::EmptyDataset)?;
    PointSet::from_rows_with_ids(dims, &rows, ids).map_err(|e| Error::Format(e.to_string()))
}

/// `id,x0,x1,...` header, then one line per point. Coordinates use the
/// shortest representation that parses back to the same value.
pub fn format_csv(points: &PointSet) -> String {
    let mut s = String::from("id");
    for d in 0..points.dims() {
        let _ = write!(s, ",x{d}");
    }
    s.push('\n');
    for (i, id) in points.ids().iter().enumerate() {
        let _ = write!(s, "{id}");
        for col in points.columns() {
            let _ = write!(s, ",{}", col[i]);
        }
        s.push('\n');
    }
    s
}

/// Reads a dataset, recognising PKD1 by its magic and treating anything
/// else as CSV. The seed is only known for PKD1 files.
pub fn read_points(path: &Path) -> Result<(PointSet, Option<u64>)> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(DATASET_MAGIC) {
        let (ps, seed) = decode_pkd1(&bytes)?;
        return Ok((ps, Some(seed)));
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::Format(format!("{}: neither PKD1 nor text", path.display())))?;
    Ok((parse_csv(&text)?, None))
}

pub fn write_points(path: &Path, points: &PointSet, format: PointFormat, seed: u64) -> Result<()> {
    let bytes = match format {
        PointFormat::Pkd1 => encode_pkd1(points, seed),
        PointFormat::Csv => format_csv(points).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_node_ref(w: &mut Writer, r: Option<NodeRef>) {
    match r {
        None => {
            w.u8(0);
            w.u32(0);
        }
        Some(NodeRef::Interior(i)) => {
            w.u8(1);
            w.u32(i);
        }
        Some(NodeRef::Leaf(i)) => {
            w.u8(2);
            w.u32(i);
        }
    }
}

fn read_node_ref(r: &mut Reader<'_>) -> Result<Option<NodeRef>> {
    let tag = r.u8()?;
    let i = r.u32()?;
    match tag {
        0 => Ok(None),
        1 => Ok(Some(NodeRef::Interior(i))),
        2 => Ok(Some(NodeRef::Leaf(i))),
        t => Err(Error::Format(format!("bad node tag {t}"))),
    }
}

fn write_local_tree(w: &mut Writer, t: &LocalTree) {
    w.u64(t.bucket_size() as u64);
    write_node_ref(w, t.root());
    w.u32(t.nodes().len() as u32);
    for n in t.nodes() {
        w.u32(n.plane.dim as u32);
        w.f64(n.plane.value);
        write_node_ref(w, Some(n.left));
        write_node_ref(w, Some(n.right));
        w.u64(n.count);
    }
    w.u32(t.leaves().len() as u32);
    for b in t.leaves() {
        w.u64(b.start);
        w.u64(b.len);
    }
    w.u64(t.len() as u64);
    w.ids_and_columns(t.points());
}

fn read_local_tree(r: &mut Reader<'_>, dims: usize) -> Result<LocalTree> {
    let bucket_size = r.u64()? as usize;
    let root = read_node_ref(r)?;
    let child =
        |r: &mut Reader<'_>| read_node_ref(r)?.ok_or_else(|| Error::Format("missing child".into()));
    let n_nodes = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(n_nodes.min(r.remaining() / 30));
    for _ in 0..n_nodes {
        let dim = r.u32()? as usize;
        let value = r.f64()?;
        let left = child(r)?;
        let right = child(r)?;
        let count = r.u64()?;
        nodes.push(Interior {
            plane: SplitPlane { dim, value },
            left,
            right,
            count,
        });
    }
    let n_leaves = r.u32()? as usize;
    let mut leaves = Vec::with_capacity(n_leaves.min(r.remaining() / 16));
    for _ in 0..n_leaves {
        leaves.push(Bucket {
            start: r.u64()?,
            len: r.u64()?,
        });
    }
    let count = usize::try_from(r.u64()?).map_err(|_| Error::Format("count too large".into()))?;
    let points = r.ids_and_columns(dims, count)?;
    LocalTree::from_parts(root, nodes, leaves, points, bucket_size)
}

pub fn encode_bundle(cluster: &Cluster, seed: u64) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(BUNDLE_MAGIC);
    w.u64(seed);
    cluster.global().write(&mut w);
    for s in cluster.states() {
        write_local_tree(&mut w, &s.local);
    }
    w.finish()
}

/// Rebuilds the cluster and checks every structural invariant, so a
/// corrupted bundle is rejected rather than queried.
pub fn decode_bundle(bytes: &[u8]) -> Result<(Cluster, u64)> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != BUNDLE_MAGIC {
        return Err(Error::Format("not a tree bundle (bad magic)".into()));
    }
    let seed = r.u64()?;
    let global = GlobalTree::read(&mut r)?;
    let states = (0..global.ranks())
        .map(|rank| {
            Ok(RankState {
                rank,
                local: read_local_tree(&mut r, global.dims())?,
                global: global.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    let mut seen = std::collections::HashSet::new();
    for s in &states {
        if let Some(&id) = s.points().ids().iter().find(|&&id| !seen.insert(id)) {
            return Err(Error::Format(format!("point id {id} appears on two ranks")));
        }
    }
    Ok((Cluster::from_states(states)?, seed))
}

pub fn write_bundle(path: &Path, cluster: &Cluster, seed: u64) -> Result<()> {
    fs::write(path, encode_bundle(cluster, seed)).map_err(|e| io_err(path, e))
}

pub fn read_bundle(path: &Path) -> Result<(Cluster, u64)> {
    decode_bundle(&fs::read(path).map_err(|e| io_err(path, e))?)
}

/// One line per query: `query_id` then `,point_id,sq_dist` per neighbor.
/// Rejected queries become `#error,query_id,message` lines.
pub fn format_results(results: &[KnnResult], errors: &[QueryError]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = write!(s, "{}", r.query_id);
        for n in &r.neighbors {
            let _ = write!(s, ",{},{}", n.point_id, n.sq_dist);
        }
        s.push('\n');
    }
    for e in errors {
        let _ = writeln!(s, "#error,{},{}", e.query_id, e.error);
    }
    s
}

/// Parses [`format_results`] output back into results; error lines are skipped.
pub fn parse_results(text: &str) -> Result<Vec<KnnResult>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Format(format!("results line {}: {line:?}", i + 1));
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() % 2 != 1 {
            return Err(bad());
        }
        let query_id = fields[0].parse().map_err(|_| bad())?;
        let neighbors = fields[1..]
            .chunks(2)
            .map(|c| {
                Ok(crate::neighbor::Neighbor::new(
                    c[1].parse().map_err(|_| bad())?,
                    c[0].parse().map_err(|_| bad())?,
                    0,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = neighbors.len();
        out.push(KnnResult::from_unsorted(query_id, neighbors, k.max(1)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::ClusterConfig;
    use crate::harness::datagen::{generate_dataset, DatasetKind};
    use crate::local_tree::BuildConfig;

    #[test]
    fn pkd1_layout_and_roundtrip() {
        let ps =
            PointSet::from_rows_with_ids(2, &[vec![1.0, 2.0], vec![3.0, 4.0]], vec![5, 6]).unwrap();
        let bytes = encode_pkd1(&ps, 77);
        assert_eq!(&bytes[..4], b"PKD1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &77u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &5u64.to_le_bytes());
        assert_eq!(&bytes[40..48], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[48..56], &3.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 16 + 32);
        assert_eq!(decode_pkd1(&bytes).unwrap(), (ps, 77));
        assert!(decode_pkd1(&bytes[..50]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_pkd1(&bad).is_err());
    }

    #[test]
    fn csv_variants() {
        let ps = parse_csv("id,x,y\n7,1.5,2\n9,-3,4e2\n").unwrap();
        assert_eq!(ps.ids(), &[7, 9]);
        assert_eq!(ps.row(1), vec![-3.0, 400.0]);
        let ps = parse_csv("1,2\n3,4\n\n").unwrap();
        assert_eq!(ps.ids(), &[0, 1]);
        let ps = parse_csv("x,y\n1,2\n").unwrap();
        assert_eq!(ps.row(0), vec![1.0, 2.0]);
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("1,nan\n").is_err());
        assert!(parse_csv("id,x\n1,2\n1,3\n").is_err());
        assert!(parse_csv("").is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let ps = generate_dataset(DatasetKind::GaussianClusters, 300, 3, 1);
        assert_eq!(parse_csv(&format_csv(&ps)).unwrap(), ps);
    }

    #[test]
    fn bundle_roundtrip_is_bit_exact() {
        let ps = generate_dataset(DatasetKind::Uniform, 3000, 3, 2);
        let cfg = ClusterConfig {
            ranks: 4,
            local: BuildConfig {
                bucket_size: 16,
                ..Default::default()
            },
            ..Default::default()
        };
        let (c, _) = Cluster::build(&ps, &cfg).unwrap();
        let bytes = encode_bundle(&c, 5);
        let (back, seed) = decode_bundle(&bytes).unwrap();
        assert_eq!(seed, 5);
        assert_eq!(back, c);
        assert_eq!(encode_bundle(&back, 5), bytes);
        assert!(decode_bundle(&bytes[..bytes.len() - 3]).is_err());
        // flip a split value deep inside the first rank's tree
        let mut bad = bytes.clone();
        let off = 4 + 8 + 8 + 3 * 12 + 8 + 5 + 4 + 4;
        bad[off..off + 8].copy_from_slice(&1e9f64.to_le_bytes());
        assert!(decode_bundle(&bad).is_err());
    }

    #[test]
    fn results_roundtrip() {
        let r = KnnResult::from_unsorted(
            3,
            vec![
                crate::Neighbor::new(0.1, 4, 0),
                crate::Neighbor::new(0.30000000000000004, 2, 0),
            ],
            2,
        );
        let text = format_results(std::slice::from_ref(&r), &[]);
        assert_eq!(text, "3,4,0.1,2,0.30000000000000004\n");
        assert_eq!(parse_results(&text).unwrap(), vec![r]);
    }
}

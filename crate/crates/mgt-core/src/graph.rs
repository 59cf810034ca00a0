//! Immutable CSR graphs with node features and labels.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense node index in `0..N`.
pub type NodeId = u32;

/// Compressed sparse row adjacency. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    m: usize,
    out_offsets: Vec<usize>,
    out_targets: Vec<NodeId>,
    directed: bool,
}

impl Graph {
    /// Build from an edge list. Duplicates are removed, targets sorted
    /// ascending per source. If `undirected` is set the edge set is
    /// symmetrized first.
    pub fn from_edges(n: usize, edges: &[(NodeId, NodeId)], undirected: bool) -> Result<Self> {
        for &(u, v) in edges {
            if u as usize >= n {
                return Err(Error::NodeOutOfRange { node: u as u64, n });
            }
            if v as usize >= n {
                return Err(Error::NodeOutOfRange { node: v as u64, n });
            }
        }
        let mut all: Vec<(NodeId, NodeId)> = Vec::with_capacity(if undirected {
            edges.len() * 2
        } else {
            edges.len()
        });
        all.extend_from_slice(edges);
        if undirected {
            all.extend(edges.iter().map(|&(u, v)| (v, u)));
        }
        all.sort_unstable();
        all.dedup();

        let mut out_offsets = vec![0usize; n + 1];
        for &(u, _) in &all {
            out_offsets[u as usize + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
        }
        let out_targets: Vec<NodeId> = all.iter().map(|&(_, v)| v).collect();
        Ok(Graph {
            n,
            m: out_targets.len(),
            out_offsets,
            out_targets,
            directed: !undirected,
        })
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.m
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Out-neighbors of `v`, sorted ascending.
    ///
    /// Panics if `v >= N`; validated entry points live on the operations that
    /// accept external node ids.
    pub fn out_neighbors(&self, v: NodeId) -> &[NodeId] {
        let v = v as usize;
        assert!(v < self.n, "node {v} out of range (N={})", self.n);
        &self.out_targets[self.out_offsets[v]..self.out_offsets[v + 1]]
    }

    pub fn out_degree(&self, v: NodeId) -> usize {
        self.out_neighbors(v).len()
    }

    pub fn check_node(&self, v: NodeId) -> Result<()> {
        if (v as usize) < self.n {
            Ok(())
        } else {
            Err(Error::NodeOutOfRange {
                node: v as u64,
                n: self.n,
            })
        }
    }

    /// True if `u -> v` exists. Binary search over the sorted neighbor slice.
    pub fn has_edge(&self, u: NodeId, v: NodeId) -> bool {
        self.out_neighbors(u).binary_search(&v).is_ok()
    }

    /// Reconstruct the (deduplicated) edge list.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        (0..self.n as NodeId)
            .flat_map(move |u| self.out_neighbors(u).iter().map(move |&v| (u, v)))
    }
}

/// Mapping from external node ids to the dense internal `0..N` range,
/// produced by the edge-list loader and persisted alongside the graph.
#[derive(Debug, Clone, Default)]
pub struct NodeIdMap {
    /// `external[i]` is the external id of internal node `i`.
    pub external: Vec<u64>,
}

impl NodeIdMap {
    pub fn internal(&self, external: u64) -> Option<NodeId> {
        self.external
            .binary_search(&external)
            .ok()
            .map(|i| i as NodeId)
    }

    pub fn is_identity(&self) -> bool {
        self.external
            .iter()
            .enumerate()
            .all(|(i, &e)| e == i as u64)
    }

    /// Write as CSV `external_id,internal_id`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for (i, &ext) in self.external.iter().enumerate() {
            writeln!(f, "{ext},{i}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// Load a whitespace-separated edge list. Lines starting with `#` are
/// ignored. External ids are remapped to dense `0..N` in ascending order.
pub fn load_edge_list(path: &Path, undirected: bool) -> Result<(Graph, NodeIdMap)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut raw_edges: Vec<(u64, u64)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut it = trimmed.split_whitespace();
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: "expected two whitespace-separated node ids".into(),
            });
        };
        if it.next().is_some() {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: "expected exactly two fields".into(),
            });
        }
        let u: u64 = a.parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad node id {a:?}"),
        })?;
        let v: u64 = b.parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad node id {b:?}"),
        })?;
        raw_edges.push((u, v));
    }
    if raw_edges.is_empty() {
        return Err(Error::EmptyInput { path: path.into() });
    }

    let mut ids: Vec<u64> = raw_edges.iter().flat_map(|&(u, v)| [u, v]).collect();
    ids.sort_unstable();
    ids.dedup();
    let index: HashMap<u64, NodeId> = ids
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i as NodeId))
        .collect();

    let edges: Vec<(NodeId, NodeId)> = raw_edges
        .iter()
        .map(|&(u, v)| (index[&u], index[&v]))
        .collect();
    let graph = Graph::from_edges(ids.len(), &edges, undirected)?;
    Ok((graph, NodeIdMap { external: ids }))
}

/// Per-node class labels with train/valid/test split assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LabelSet {
    pub entries: Vec<(NodeId, usize, Split)>,
    pub num_classes: usize,
}

impl LabelSet {
    pub fn nodes_in(&self, split: Split) -> Vec<(NodeId, usize)> {
        self.entries
            .iter()
            .filter(|&&(_, _, s)| s == split)
            .map(|&(v, c, _)| (v, c))
            .collect()
    }
}

/// Load `node_id,class,split` CSV. An optional header line is tolerated.
pub fn load_labels(path: &Path) -> Result<LabelSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    let mut seen = HashMap::new();
    let mut num_classes = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: "expected node_id,class,split".into(),
            });
        }
        let Ok(node) = fields[0].parse::<NodeId>() else {
            if line_no == 1 {
                continue; // header
            }
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: format!("bad node id {:?}", fields[0]),
            });
        };
        let class: usize = fields[1].parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad class {:?}", fields[1]),
        })?;
        let split = Split::parse(fields[2]).ok_or_else(|| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad split {:?} (want train|valid|test)", fields[2]),
        })?;
        if seen.insert(node, split).is_some() {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: format!("node {node} labeled twice; splits must be disjoint"),
            });
        }
        num_classes = num_classes.max(class + 1);
        entries.push((node, class, split));
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput { path: path.into() });
    }
    Ok(LabelSet {
        entries,
        num_classes,
    })
}

pub fn write_labels(path: &Path, labels: &LabelSet) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for &(node, class, split) in &labels.entries {
        writeln!(f, "{node},{class},{}", split.as_str()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Labeled node pairs for link prediction.
#[derive(Debug, Clone, Default)]
pub struct EdgeLabelSet {
    pub entries: Vec<(NodeId, NodeId, bool, Split)>,
}

impl EdgeLabelSet {
    pub fn pairs_in(&self, split: Split) -> Vec<(NodeId, NodeId, bool)> {
        self.entries
            .iter()
            .filter(|&&(_, _, _, s)| s == split)
            .map(|&(u, v, l, _)| (u, v, l))
            .collect()
    }
}

/// Load `u,v,label,split` CSV with label in {0,1}.
pub fn load_edge_labels(path: &Path) -> Result<EdgeLabelSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut entries = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: "expected u,v,label,split".into(),
            });
        }
        let Ok(u) = fields[0].parse::<NodeId>() else {
            if line_no == 1 {
                continue;
            }
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: format!("bad node id {:?}", fields[0]),
            });
        };
        let v: NodeId = fields[1].parse().map_err(|_| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad node id {:?}", fields[1]),
        })?;
        if u == v {
            return Err(Error::MalformedLine {
                path: path.into(),
                line: line_no,
                msg: "self-pair u == v".into(),
            });
        }
        let label = match fields[2] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedLine {
                    path: path.into(),
                    line: line_no,
                    msg: format!("bad label {other:?} (want 0|1)"),
                })
            }
        };
        let split = Split::parse(fields[3]).ok_or_else(|| Error::MalformedLine {
            path: path.into(),
            line: line_no,
            msg: format!("bad split {:?}", fields[3]),
        })?;
        entries.push((u, v, label, split));
    }
    if entries.is_empty() {
        return Err(Error::EmptyInput { path: path.into() });
    }
    Ok(EdgeLabelSet { entries })
}

pub fn write_edge_labels(path: &Path, set: &EdgeLabelSet) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for &(u, v, label, split) in &set.entries {
        writeln!(f, "{u},{v},{},{}", label as u8, split.as_str())
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_edge_file(contents: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), contents).unwrap();
        f
    }

    #[test]
    fn symmetric_pair() {
        let f = tmp_edge_file("0 1\n1 0\n");
        let (g, map) = load_edge_list(f.path(), true).unwrap();
        assert_eq!(g.node_count(), 2);
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.out_degree(0), 1);
        assert_eq!(g.out_degree(1), 1);
        assert!(map.is_identity());
    }

    #[test]
    fn duplicate_removal_directed() {
        let f = tmp_edge_file("0 1\n0 1\n");
        let (g, _) = load_edge_list(f.path(), false).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn three_cycle_out_degrees() {
        let f = tmp_edge_file("0 1\n1 2\n2 0\n");
        let (g, _) = load_edge_list(f.path(), false).unwrap();
        for v in 0..3 {
            assert_eq!(g.out_degree(v), 1);
        }
        assert_eq!(g.out_neighbors(0), &[1]);
    }

    #[test]
    fn comments_and_remap() {
        let f = tmp_edge_file("# a comment\n10 30\n30 20\n");
        let (g, map) = load_edge_list(f.path(), false).unwrap();
        assert_eq!(g.node_count(), 3);
        assert_eq!(map.external, vec![10, 20, 30]);
        // 10 -> 0, 20 -> 1, 30 -> 2
        assert_eq!(g.out_neighbors(0), &[2]);
        assert_eq!(g.out_neighbors(2), &[1]);
        assert_eq!(map.internal(30), Some(2));
        assert_eq!(map.internal(11), None);
    }

    #[test]
    fn malformed_line_reports_number() {
        let f = tmp_edge_file("0 1\nbogus\n");
        let err = load_edge_list(f.path(), false).unwrap_err();
        assert!(err.to_string().contains(":2:"), "got: {err}");
    }

    #[test]
    fn empty_file_is_error() {
        let f = tmp_edge_file("# only comments\n");
        assert!(matches!(
            load_edge_list(f.path(), false),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = Graph::from_edges(3, &[(0, 1)], false).unwrap();
        assert_eq!(g.out_neighbors(2), &[] as &[NodeId]);
    }

    #[test]
    fn undirected_pair_neighbors() {
        let g = Graph::from_edges(2, &[(0, 1)], true).unwrap();
        assert_eq!(g.out_neighbors(1), &[0]);
    }

    #[test]
    fn self_loops_preserved() {
        let g = Graph::from_edges(2, &[(0, 0), (0, 1)], false).unwrap();
        assert_eq!(g.out_neighbors(0), &[0, 1]);
    }

    #[test]
    fn degree_sum_equals_edge_count() {
        let g = Graph::from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3)], true).unwrap();
        let total: usize = (0..4).map(|v| g.out_degree(v)).sum();
        assert_eq!(total, g.edge_count());
    }

    #[test]
    fn symmetrization_idempotent() {
        let edges = [(0, 1), (1, 2), (2, 0), (2, 1)];
        let once = Graph::from_edges(3, &edges, true).unwrap();
        let again_edges: Vec<_> = once.edges().collect();
        let twice = Graph::from_edges(3, &again_edges, true).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn csr_round_trip() {
        let edges = [(0u32, 1u32), (0, 2), (2, 1), (1, 0)];
        let g = Graph::from_edges(3, &edges, false).unwrap();
        let mut rebuilt: Vec<_> = g.edges().collect();
        rebuilt.sort_unstable();
        let mut want = edges.to_vec();
        want.sort_unstable();
        want.dedup();
        assert_eq!(rebuilt, want);
    }

    #[test]
    fn labels_round_trip() {
        let set = LabelSet {
            entries: vec![
                (0, 1, Split::Train),
                (1, 0, Split::Valid),
                (2, 1, Split::Test),
            ],
            num_classes: 2,
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_labels(f.path(), &set).unwrap();
        let back = load_labels(f.path()).unwrap();
        assert_eq!(back.num_classes, 2);
        assert_eq!(back.entries, set.entries);
        assert_eq!(back.nodes_in(Split::Test), vec![(2, 1)]);
    }

    #[test]
    fn duplicate_label_rejected() {
        let f = tmp_edge_file("0,1,train\n0,0,test\n");
        assert!(load_labels(f.path()).is_err());
    }

    #[test]
    fn edge_labels_round_trip() {
        let set = EdgeLabelSet {
            entries: vec![(0, 1, true, Split::Train), (1, 2, false, Split::Test)],
        };
        let f = tempfile::NamedTempFile::new().unwrap();
        write_edge_labels(f.path(), &set).unwrap();
        let back = load_edge_labels(f.path()).unwrap();
        assert_eq!(back.entries, set.entries);
    }

    #[test]
    fn edge_label_self_pair_rejected() {
        let f = tmp_edge_file("3,3,1,train\n");
        assert!(load_edge_labels(f.path()).is_err());
    }
}

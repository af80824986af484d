//! Chronological edge-stream store with per-node interaction indices.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeEvent {
    /// Position in the source file, 0-based.
    pub edge_id: u32,
    pub src: NodeId,
    pub dst: NodeId,
    pub timestamp: f64,
    pub label: Option<u32>,
}

/// One interaction seen from a single endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeEntry {
    pub edge_id: u32,
    pub other: NodeId,
    pub timestamp: f64,
    pub was_source: bool,
}

/// Immutable, chronologically ordered directed edge stream.
#[derive(Debug, Clone)]
pub struct TemporalGraph {
    events: Vec<EdgeEvent>,
    num_nodes: usize,
    per_node: Vec<Vec<NodeEntry>>,
}

impl TemporalGraph {
    /// Builds the graph from events in file order. Edge ids are reassigned
    /// densely from the input order; events are then sorted by
    /// `(timestamp, edge_id)`.
    pub fn from_rows(
        rows: impl IntoIterator<Item = (NodeId, NodeId, f64, Option<u32>)>,
        num_nodes_hint: Option<usize>,
    ) -> Result<Self> {
        let mut events = Vec::new();
        for (i, (src, dst, timestamp, label)) in rows.into_iter().enumerate() {
            if !(timestamp >= 0.0) || !timestamp.is_finite() {
                return Err(Error::Invalid(format!(
                    "row {i}: timestamp must be finite and non-negative, got {timestamp}"
                )));
            }
            let edge_id = u32::try_from(i)
                .map_err(|_| Error::Invalid("more than u32::MAX edges".into()))?;
            events.push(EdgeEvent {
                edge_id,
                src,
                dst,
                timestamp,
                label,
            });
        }

        let was_sorted = events
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp);
        if !was_sorted {
            log::warn!("edge timestamps are not non-decreasing in input order; re-sorting");
            events.sort_by(|a, b| {
                a.timestamp
                    .total_cmp(&b.timestamp)
                    .then(a.edge_id.cmp(&b.edge_id))
            });
        }

        let observed = events
            .iter()
            .map(|e| e.src.max(e.dst) as usize + 1)
            .max()
            .unwrap_or(0);
        let num_nodes = observed.max(num_nodes_hint.unwrap_or(0));

        let mut per_node: Vec<Vec<NodeEntry>> = vec![Vec::new(); num_nodes];
        for e in &events {
            per_node[e.src as usize].push(NodeEntry {
                edge_id: e.edge_id,
                other: e.dst,
                timestamp: e.timestamp,
                was_source: true,
            });
            if e.dst != e.src {
                per_node[e.dst as usize].push(NodeEntry {
                    edge_id: e.edge_id,
                    other: e.src,
                    timestamp: e.timestamp,
                    was_source: false,
                });
            }
        }

        Ok(Self {
            events,
            num_nodes,
            per_node,
        })
    }

    pub fn events(&self) -> &[EdgeEvent] {
        &self.events
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Every event touching `node`, in global chronological order.
    pub fn node_history(&self, node: NodeId) -> &[NodeEntry] {
        self.per_node
            .get(node as usize)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// The part of `node`'s history strictly before `t`.
    fn history_before(&self, node: NodeId, t: f64) -> &[NodeEntry] {
        let hist = self.node_history(node);
        let end = hist.partition_point(|e| e.timestamp < t);
        &hist[..end]
    }

    /// The `k - 1` most recent interactions of `node` strictly before
    /// `query_time`, oldest first, padded at the tail.
    pub fn sample_recent_neighbors(
        &self,
        node: NodeId,
        query_time: f64,
        k: usize,
    ) -> NeighborSequence {
        assert!(k >= 2, "k must leave room for the query node");
        let slots = k - 1;
        let hist = self.history_before(node, query_time);
        let start = hist.len().saturating_sub(slots);
        let mut entries: Vec<NeighborSlot> = hist[start..]
            .iter()
            .map(|e| NeighborSlot {
                neighbor: e.other,
                edge_id: e.edge_id,
                timestamp: e.timestamp,
                valid: true,
            })
            .collect();
        entries.resize(slots, NeighborSlot::PADDING);
        NeighborSequence {
            node,
            query_time,
            entries,
        }
    }

    /// All nodes `node` interacted with (either direction) strictly before
    /// `until_time`.
    pub fn historical_neighbor_set(&self, node: NodeId, until_time: f64) -> BTreeSet<NodeId> {
        self.history_before(node, until_time)
            .iter()
            .map(|e| e.other)
            .collect()
    }

    /// Whether `a` and `b` interacted strictly before `until_time`.
    pub fn interacted_before(&self, a: NodeId, b: NodeId, until_time: f64) -> bool {
        // Scan the shorter history.
        let (x, y) = if self.node_history(a).len() <= self.node_history(b).len() {
            (a, b)
        } else {
            (b, a)
        };
        self.history_before(x, until_time).iter().any(|e| e.other == y)
    }

    pub fn chronological_split(&self, spec: SplitSpec) -> Result<SplitRanges> {
        spec.validate()?;
        Ok(spec.ranges(self.events.len()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeighborSlot {
    pub neighbor: NodeId,
    pub edge_id: u32,
    pub timestamp: f64,
    pub valid: bool,
}

impl NeighborSlot {
    pub const PADDING: NeighborSlot = NeighborSlot {
        neighbor: 0,
        edge_id: 0,
        timestamp: 0.0,
        valid: false,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSequence {
    pub node: NodeId,
    pub query_time: f64,
    pub entries: Vec<NeighborSlot>,
}

impl NeighborSequence {
    pub fn valid(&self) -> impl Iterator<Item = &NeighborSlot> {
        self.entries.iter().filter(|s| s.valid)
    }

    pub fn num_valid(&self) -> usize {
        self.valid().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: f64,
    pub val_end: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_end: 0.70,
            val_end: 0.85,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.train_end > 0.0
            && self.train_end < 1.0
            && self.val_end > self.train_end
            && self.val_end <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "split boundaries must satisfy 0 < train_end < val_end <= 1, got {} / {}",
                self.train_end, self.val_end
            )))
        }
    }

    pub fn ranges(&self, num_events: usize) -> SplitRanges {
        let a = (num_events as f64 * self.train_end).floor() as usize;
        let b = ((num_events as f64 * self.val_end).floor() as usize).min(num_events);
        SplitRanges {
            train: 0..a,
            val: a..b,
            test: b..num_events,
        }
    }
}

/// Index ranges into [`TemporalGraph::events`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitRanges {
    pub fn get(&self, which: SplitName) -> Range<usize> {
        match which {
            SplitName::Train => self.train.clone(),
            SplitName::Val => self.val.clone(),
            SplitName::Test => self.test.clone(),
        }
    }
}

/// Reads an edge CSV with header `src,dst,timestamp[,label]`.
pub fn ingest_edges(path: &Path, num_nodes_hint: Option<usize>) -> Result<TemporalGraph> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (src_col, dst_col, ts_col, label_col) =
        match (col("src"), col("dst"), col("timestamp"), col("label")) {
            (Some(s), Some(d), Some(t), l) => (s, d, t, l),
            // Headerless empty file.
            _ if headers.is_empty() => return TemporalGraph::from_rows([], num_nodes_hint),
            _ => {
                return Err(parse_err(
                    1,
                    format!("expected header src,dst,timestamp[,label], got {headers:?}"),
                ))
            }
        };

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize, what: &str| {
            record
                .get(i)
                .ok_or_else(|| parse_err(line, format!("missing {what} column")))
        };
        let src: NodeId = field(src_col, "src")?
            .parse()
            .map_err(|e| parse_err(line, format!("bad src: {e}")))?;
        let dst: NodeId = field(dst_col, "dst")?
            .parse()
            .map_err(|e| parse_err(line, format!("bad dst: {e}")))?;
        let ts: f64 = field(ts_col, "timestamp")?
            .parse()
            .map_err(|e| parse_err(line, format!("bad timestamp: {e}")))?;
        if !(ts >= 0.0) || !ts.is_finite() {
            return Err(parse_err(
                line,
                format!("timestamp must be finite and non-negative, got {ts}"),
            ));
        }
        let label = match label_col.and_then(|c| record.get(c)) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse::<u32>()
                    .map_err(|e| parse_err(line, format!("bad label: {e}")))?,
            ),
        };
        rows.push((src, dst, ts, label));
    }
    TemporalGraph::from_rows(rows, num_nodes_hint)
}

/// Writes the CSV format read by [`ingest_edges`], in event order.
pub fn write_edges_csv(path: &Path, events: &[EdgeEvent]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["src", "dst", "timestamp", "label"]).map_err(io)?;
    for e in events {
        let label = e.label.map(|l| l.to_string()).unwrap_or_default();
        w.write_record([
            e.src.to_string(),
            e.dst.to_string(),
            e.timestamp.to_string(),
            label,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn graph(rows: &[(u32, u32, f64)]) -> TemporalGraph {
        TemporalGraph::from_rows(rows.iter().map(|&(s, d, t)| (s, d, t, None)), None).unwrap()
    }

    #[test]
    fn ties_resolved_by_file_order() {
        let g = TemporalGraph::from_rows(
            [(0, 1, 5.0, Some(0)), (2, 1, 3.0, Some(1)), (0, 2, 5.0, Some(0))],
            None,
        )
        .unwrap();
        let order: Vec<_> = g
            .events()
            .iter()
            .map(|e| (e.src, e.dst, e.timestamp, e.edge_id))
            .collect();
        assert_eq!(order, vec![(2, 1, 3.0, 1), (0, 1, 5.0, 0), (0, 2, 5.0, 2)]);
        assert_eq!(g.num_nodes(), 3);
    }

    #[test]
    fn empty_file_uses_hint() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "").unwrap();
        let g = ingest_edges(&p, Some(4)).unwrap();
        assert_eq!(g.num_events(), 0);
        assert_eq!(g.num_nodes(), 4);
        std::fs::write(&p, "src,dst,timestamp,label\n").unwrap();
        let g = ingest_edges(&p, None).unwrap();
        assert_eq!((g.num_events(), g.num_nodes()), (0, 0));
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        let mut f = std::fs::File::create(&p).unwrap();
        writeln!(f, "src,dst,timestamp,label\n0,1,1,0\n0,x,2,0").unwrap();
        match ingest_edges(&p, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn negative_timestamp_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "src,dst,timestamp\n0,1,-1\n").unwrap();
        assert!(matches!(ingest_edges(&p, None), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn label_column_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        std::fs::write(&p, "src,dst,timestamp\n0,1,1\n1,0,2\n").unwrap();
        let g = ingest_edges(&p, None).unwrap();
        assert!(g.events().iter().all(|e| e.label.is_none()));
    }

    #[test]
    fn split_arithmetic() {
        let spec = SplitSpec::default();
        assert_eq!(
            spec.ranges(10),
            SplitRanges {
                train: 0..7,
                val: 7..8,
                test: 8..10
            }
        );
        assert_eq!(
            spec.ranges(0),
            SplitRanges {
                train: 0..0,
                val: 0..0,
                test: 0..0
            }
        );
        assert_eq!(
            spec.ranges(1_000_000),
            SplitRanges {
                train: 0..700_000,
                val: 700_000..850_000,
                test: 850_000..1_000_000
            }
        );
        assert!(SplitSpec {
            train_end: 0.9,
            val_end: 0.5
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sampling_is_strictly_causal() {
        let g = graph(&[(0, 1, 1.0), (0, 2, 2.0), (3, 0, 3.0)]);
        let seq = g.sample_recent_neighbors(0, 3.0, 4);
        let ids: Vec<_> = seq.valid().map(|s| s.neighbor).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(seq.entries.len(), 3);
        assert!(!seq.entries[2].valid);

        let none = g.sample_recent_neighbors(0, 1.0, 4);
        assert_eq!(none.num_valid(), 0);
        let unknown = g.sample_recent_neighbors(99, 10.0, 4);
        assert_eq!(unknown.num_valid(), 0);
    }

    #[test]
    fn destination_only_node_sees_its_sources() {
        let g = graph(&[(0, 5, 1.0), (1, 5, 2.0)]);
        let set = g.historical_neighbor_set(5, 10.0);
        assert_eq!(set.into_iter().collect::<Vec<_>>(), vec![0, 1]);
        assert!(g.historical_neighbor_set(5, 0.0).is_empty());
    }

    #[test]
    fn self_loops_recorded_once() {
        let g = graph(&[(2, 2, 1.0)]);
        assert_eq!(g.node_history(2).len(), 1);
        let seq = g.sample_recent_neighbors(2, 5.0, 3);
        assert_eq!(seq.entries[0].neighbor, 2);
    }

    fn arb_graph() -> impl Strategy<Value = TemporalGraph> {
        prop::collection::vec((0u32..12, 0u32..12, 0u32..30), 0..80).prop_map(|rows| {
            TemporalGraph::from_rows(rows.into_iter().map(|(s, d, t)| (s, d, t as f64, None)), None)
                .unwrap()
        })
    }

    proptest! {
        #[test]
        fn neighbor_sequences_causal_and_recent(g in arb_graph(), node in 0u32..12, t in 0u32..32, k in 2usize..8) {
            let seq = g.sample_recent_neighbors(node, t as f64, k);
            prop_assert_eq!(seq.entries.len(), k - 1);
            let valid: Vec<_> = seq.valid().copied().collect();
            // valid prefix then padding
            prop_assert!(seq.entries.iter().skip(valid.len()).all(|s| !s.valid));
            for s in &valid {
                prop_assert!(s.timestamp < t as f64);
            }
            // ascending by (timestamp, edge_id) in global order
            let order: Vec<_> = g.events().iter().map(|e| e.edge_id).collect();
            let pos = |id: u32| order.iter().position(|&x| x == id).unwrap();
            for w in valid.windows(2) {
                prop_assert!(pos(w[0].edge_id) < pos(w[1].edge_id));
            }
            let prior: Vec<_> = g.events().iter()
                .filter(|e| (e.src == node || e.dst == node) && e.timestamp < t as f64)
                .collect();
            prop_assert_eq!(valid.len(), prior.len().min(k - 1));
            if let Some(oldest) = valid.first() {
                let newer_excluded = prior.iter()
                    .filter(|e| pos(e.edge_id) > pos(oldest.edge_id))
                    .count();
                prop_assert_eq!(newer_excluded, valid.len() - 1);
            }
            // deterministic
            prop_assert_eq!(seq, g.sample_recent_neighbors(node, t as f64, k));
        }

        #[test]
        fn per_node_index_reconstructs_events(g in arb_graph()) {
            let mut seen = std::collections::BTreeMap::new();
            for n in 0..g.num_nodes() as u32 {
                for e in g.node_history(n) {
                    *seen.entry(e.edge_id).or_insert(0usize) += 1;
                }
            }
            prop_assert_eq!(seen.len(), g.num_events());
            for e in g.events() {
                let expect = if e.src == e.dst { 1 } else { 2 };
                prop_assert_eq!(seen[&e.edge_id], expect);
            }
        }
    }
}

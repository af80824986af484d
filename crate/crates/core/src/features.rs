//! Per-token feature construction: static node/edge rows, time deltas, and
//! thresholded within/cross frequency counts.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NeighborSequence, NodeId, TemporalGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Source,
    Destination,
}

impl Role {
    pub fn other(self) -> Role {
        match self {
            Role::Source => Role::Destination,
            Role::Destination => Role::Source,
        }
    }
}

/// Static node and edge attribute rows, indexed by node id and edge id.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrices {
    pub node: Array2<f64>,
    pub edge: Array2<f64>,
}

impl FeatureMatrices {
    pub fn node_dim(&self) -> usize {
        self.node.ncols()
    }

    pub fn edge_dim(&self) -> usize {
        self.edge.ncols()
    }

    pub fn check_against(&self, graph: &TemporalGraph) -> Result<()> {
        if self.node.nrows() < graph.num_nodes() {
            return Err(Error::Invalid(format!(
                "node feature matrix has {} rows but graph has {} nodes",
                self.node.nrows(),
                graph.num_nodes()
            )));
        }
        if self.edge.nrows() < graph.num_events() {
            return Err(Error::Invalid(format!(
                "edge feature matrix has {} rows but graph has {} edges",
                self.edge.nrows(),
                graph.num_events()
            )));
        }
        if self.node.iter().chain(self.edge.iter()).any(|x| !x.is_finite()) {
            return Err(Error::Invalid("feature matrices contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        Ok(Self {
            node: read_matrix(&dir.join(NODE_FEATURES_FILE))?,
            edge: read_matrix(&dir.join(EDGE_FEATURES_FILE))?,
        })
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        write_matrix(&dir.join(NODE_FEATURES_FILE), &self.node)?;
        write_matrix(&dir.join(EDGE_FEATURES_FILE), &self.edge)
    }
}

pub const NODE_FEATURES_FILE: &str = "node_features.bin";
pub const EDGE_FEATURES_FILE: &str = "edge_features.bin";

const MATRIX_MAGIC: &[u8; 4] = b"DGNF";
const MATRIX_VERSION: u32 = 1;

/// Writes `DGNF | version u32 | rows u64 | cols u64 | f32 LE row-major`.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + m.len() * 4);
    buf.extend_from_slice(MATRIX_MAGIC);
    buf.extend_from_slice(&MATRIX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for &x in m.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
    if buf.len() < 24 || &buf[..4] != MATRIX_MAGIC {
        return Err(Error::format(path, "missing DGNF header"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != MATRIX_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, "shape overflow"))?;
    if buf.len() - 24 != expected {
        return Err(Error::format(
            path,
            format!("expected {expected} payload bytes for {rows}x{cols}, found {}", buf.len() - 24),
        ));
    }
    let data: Vec<f64> = buf[24..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("shape checked"))
}

/// Multiplicities for the neighbor slots of one sequence. Padding slots
/// carry `(0, 0)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCounts {
    pub role: Role,
    pub within: Vec<u32>,
    pub cross: Vec<u32>,
}

fn multiplicities(seq: &NeighborSequence) -> BTreeMap<NodeId, u32> {
    let mut m = BTreeMap::new();
    for s in seq.valid() {
        *m.entry(s.neighbor).or_insert(0) += 1;
    }
    m
}

fn counts_for(seq: &NeighborSequence, own: &BTreeMap<NodeId, u32>, other: &BTreeMap<NodeId, u32>, role: Role) -> RawCounts {
    let (within, cross) = seq
        .entries
        .iter()
        .map(|s| {
            if s.valid {
                (
                    own.get(&s.neighbor).copied().unwrap_or(0),
                    other.get(&s.neighbor).copied().unwrap_or(0),
                )
            } else {
                (0, 0)
            }
        })
        .unzip();
    RawCounts { role, within, cross }
}

pub fn compute_raw_counts(src_seq: &NeighborSequence, dst_seq: &NeighborSequence) -> (RawCounts, RawCounts) {
    let src_m = multiplicities(src_seq);
    let dst_m = multiplicities(dst_seq);
    (
        counts_for(src_seq, &src_m, &dst_m, Role::Source),
        counts_for(dst_seq, &dst_m, &src_m, Role::Destination),
    )
}

/// Counts for the prepended query node: its multiplicity in its own
/// sequence and in the opposite one.
pub fn query_counts(node: NodeId, own: &NeighborSequence, other: &NeighborSequence) -> (u32, u32) {
    let count = |seq: &NeighborSequence| seq.valid().filter(|s| s.neighbor == node).count() as u32;
    (count(own), count(other))
}

/// Maps raw count values to embedding rows; row 0 is UNK.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVocabulary {
    pub table: BTreeMap<u32, u32>,
}

impl CountVocabulary {
    pub const UNK: u32 = 0;

    pub fn build(counts: impl IntoIterator<Item = u32>, n_min: u64) -> Self {
        assert!(n_min >= 1, "n_min must be at least 1");
        let mut freq: BTreeMap<u32, u64> = BTreeMap::new();
        for c in counts {
            *freq.entry(c).or_insert(0) += 1;
        }
        Self::from_frequencies(&freq, n_min)
    }

    pub fn from_frequencies(freq: &BTreeMap<u32, u64>, n_min: u64) -> Self {
        let table = freq
            .iter()
            .filter(|&(_, &n)| n >= n_min)
            .zip(1u32..)
            .map(|((&c, _), idx)| (c, idx))
            .collect();
        Self { table }
    }

    pub fn lookup(&self, count: u32) -> u32 {
        self.table.get(&count).copied().unwrap_or(Self::UNK)
    }

    /// Number of embedding rows including UNK.
    pub fn size(&self) -> usize {
        self.table.len() + 1
    }
}

/// The four role/channel vocabularies.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountVocabs {
    pub unk_index: u32,
    pub src_within: CountVocabulary,
    pub src_cross: CountVocabulary,
    pub dst_within: CountVocabulary,
    pub dst_cross: CountVocabulary,
}

impl CountVocabs {
    pub fn within(&self, role: Role) -> &CountVocabulary {
        match role {
            Role::Source => &self.src_within,
            Role::Destination => &self.dst_within,
        }
    }

    pub fn cross(&self, role: Role) -> &CountVocabulary {
        match role {
            Role::Source => &self.src_cross,
            Role::Destination => &self.dst_cross,
        }
    }

    /// Tallies every non-padding token of every query in `range` (query
    /// positions included) and thresholds each channel at `n_min`.
    pub fn build(graph: &TemporalGraph, range: std::ops::Range<usize>, k: usize, n_min: u64) -> Self {
        let mut tallies: [BTreeMap<u32, u64>; 4] = Default::default();
        let mut bump = |ch: usize, c: u32| *tallies[ch].entry(c).or_insert(0) += 1;
        for e in &graph.events()[range] {
            let s = graph.sample_recent_neighbors(e.src, e.timestamp, k);
            let d = graph.sample_recent_neighbors(e.dst, e.timestamp, k);
            let (sc, dc) = compute_raw_counts(&s, &d);
            let (qw, qc) = query_counts(e.src, &s, &d);
            bump(0, qw);
            bump(1, qc);
            let (qw, qc) = query_counts(e.dst, &d, &s);
            bump(2, qw);
            bump(3, qc);
            for (i, _) in s.entries.iter().enumerate().filter(|(_, x)| x.valid) {
                bump(0, sc.within[i]);
                bump(1, sc.cross[i]);
            }
            for (i, _) in d.entries.iter().enumerate().filter(|(_, x)| x.valid) {
                bump(2, dc.within[i]);
                bump(3, dc.cross[i]);
            }
        }
        let [a, b, c, d] = tallies;
        Self {
            unk_index: CountVocabulary::UNK,
            src_within: CountVocabulary::from_frequencies(&a, n_min),
            src_cross: CountVocabulary::from_frequencies(&b, n_min),
            dst_within: CountVocabulary::from_frequencies(&c, n_min),
            dst_cross: CountVocabulary::from_frequencies(&d, n_min),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Raw per-position inputs for one role's sequence. Position 0 is the
/// query node; positions `1..k` are its neighbor slots.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBundle {
    pub role: Role,
    pub node_vecs: Array2<f64>,
    pub edge_vecs: Array2<f64>,
    pub time_deltas: Vec<f64>,
    pub within_index: Vec<u32>,
    pub cross_index: Vec<u32>,
    pub within_raw: Vec<u32>,
    pub cross_raw: Vec<u32>,
    pub valid: Vec<bool>,
}

impl TokenBundle {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }
}

fn row<'a>(m: &'a Array2<f64>, i: usize, what: &str) -> Result<ArrayView1<'a, f64>> {
    if i < m.nrows() {
        Ok(m.row(i))
    } else {
        Err(Error::Invalid(format!(
            "{what} feature row {i} out of range ({} rows)",
            m.nrows()
        )))
    }
}

fn assemble_one(
    feats: &FeatureMatrices,
    query_node: NodeId,
    query_time: f64,
    own: &NeighborSequence,
    other: &NeighborSequence,
    counts: &RawCounts,
    vocabs: &CountVocabs,
) -> Result<TokenBundle> {
    let k = own.entries.len() + 1;
    let role = counts.role;
    let mut b = TokenBundle {
        role,
        node_vecs: Array2::zeros((k, feats.node_dim())),
        edge_vecs: Array2::zeros((k, feats.edge_dim())),
        time_deltas: vec![0.0; k],
        within_index: vec![CountVocabulary::UNK; k],
        cross_index: vec![CountVocabulary::UNK; k],
        within_raw: vec![0; k],
        cross_raw: vec![0; k],
        valid: vec![false; k],
    };
    let within_vocab = vocabs.within(role);
    let cross_vocab = vocabs.cross(role);

    b.node_vecs
        .row_mut(0)
        .assign(&row(&feats.node, query_node as usize, "node")?);
    let (qw, qc) = query_counts(query_node, own, other);
    b.within_raw[0] = qw;
    b.cross_raw[0] = qc;
    b.within_index[0] = within_vocab.lookup(qw);
    b.cross_index[0] = cross_vocab.lookup(qc);
    b.valid[0] = true;

    for (i, slot) in own.entries.iter().enumerate() {
        if !slot.valid {
            continue;
        }
        let p = i + 1;
        b.node_vecs
            .row_mut(p)
            .assign(&row(&feats.node, slot.neighbor as usize, "node")?);
        b.edge_vecs
            .row_mut(p)
            .assign(&row(&feats.edge, slot.edge_id as usize, "edge")?);
        b.time_deltas[p] = query_time - slot.timestamp;
        b.within_raw[p] = counts.within[i];
        b.cross_raw[p] = counts.cross[i];
        b.within_index[p] = within_vocab.lookup(counts.within[i]);
        b.cross_index[p] = cross_vocab.lookup(counts.cross[i]);
        b.valid[p] = true;
    }
    Ok(b)
}

/// Builds the source and destination bundles for the query `(u, v, t)`.
/// The query edge's own feature row is never read.
pub fn assemble_bundles(
    feats: &FeatureMatrices,
    src_seq: &NeighborSequence,
    dst_seq: &NeighborSequence,
    vocabs: &CountVocabs,
    query: (NodeId, NodeId, f64),
) -> Result<(TokenBundle, TokenBundle)> {
    let (u, v, t) = query;
    if src_seq.entries.len() != dst_seq.entries.len() {
        return Err(Error::Invalid("source and destination sequences differ in length".into()));
    }
    let (sc, dc) = compute_raw_counts(src_seq, dst_seq);
    let src = assemble_one(feats, u, t, src_seq, dst_seq, &sc, vocabs)?;
    let dst = assemble_one(feats, v, t, dst_seq, src_seq, &dc, vocabs)?;
    Ok((src, dst))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::NeighborSlot;
    use proptest::prelude::*;

    fn seq(node: NodeId, ns: &[NodeId], slots: usize) -> NeighborSequence {
        let mut entries: Vec<_> = ns
            .iter()
            .enumerate()
            .map(|(i, &n)| NeighborSlot {
                neighbor: n,
                edge_id: i as u32,
                timestamp: i as f64,
                valid: true,
            })
            .collect();
        entries.resize(slots, NeighborSlot::PADDING);
        NeighborSequence {
            node,
            query_time: 100.0,
            entries,
        }
    }

    #[test]
    fn counts_worked_example() {
        // a=10, b=11, c=12
        let (s, d) = compute_raw_counts(&seq(0, &[10, 10, 11], 4), &seq(1, &[11, 12], 4));
        assert_eq!(s.within, vec![2, 2, 1, 0]);
        assert_eq!(s.cross, vec![0, 0, 1, 0]);
        assert_eq!(d.within, vec![1, 1, 0, 0]);
        assert_eq!(d.cross, vec![1, 0, 0, 0]);
    }

    #[test]
    fn disjoint_and_empty_sequences() {
        let (s, d) = compute_raw_counts(&seq(0, &[1, 2], 3), &seq(1, &[3, 4, 3], 3));
        assert!(s.cross.iter().chain(&d.cross).all(|&c| c == 0));
        let (s, d) = compute_raw_counts(&seq(0, &[], 3), &seq(1, &[], 3));
        assert!(s.within.iter().chain(&s.cross).chain(&d.within).chain(&d.cross).all(|&c| c == 0));
    }

    #[test]
    fn vocabulary_threshold() {
        let stream = std::iter::repeat_n(0, 50_000)
            .chain(std::iter::repeat_n(1, 20_000))
            .chain(std::iter::repeat_n(2, 9_999));
        let v = CountVocabulary::build(stream, 10_000);
        assert_eq!(v.table, BTreeMap::from([(0, 1), (1, 2)]));
        assert_eq!(v.lookup(2), CountVocabulary::UNK);
        assert_eq!(v.lookup(7), CountVocabulary::UNK);
        assert_eq!(v.lookup(1), 2);
        assert_eq!(v.size(), 3);
    }

    #[test]
    fn vocabulary_degenerate_streams() {
        assert_eq!(CountVocabulary::build(std::iter::empty(), 5).size(), 1);
        assert_eq!(CountVocabulary::build([3, 3, 3], 1).size(), 2);
        let all = CountVocabulary::build([0, 1, 5, 9], 1);
        assert_eq!(all.table.len(), 4);
    }

    #[test]
    fn vocab_json_has_unk_index() {
        let g = TemporalGraph::from_rows([(0, 1, 1.0, None), (1, 0, 2.0, None)], None).unwrap();
        let v = CountVocabs::build(&g, 0..2, 4, 1);
        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["unk_index"], 0);
        assert!(json["src_within"]["table"].is_object());
        let back: CountVocabs = serde_json::from_value(json).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn matrix_file_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        let m = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64 * 0.5);
        write_matrix(&p, &m).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"DGNF");
        assert_eq!(bytes.len(), 24 + 6 * 4);
        assert_eq!(read_matrix(&p).unwrap(), m);
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Format { .. })));
    }

    fn arb_seq() -> impl Strategy<Value = Vec<u32>> {
        prop::collection::vec(0u32..6, 0..6)
    }

    proptest! {
        #[test]
        fn count_symmetry_law(a in arb_seq(), b in arb_seq()) {
            let sa = seq(0, &a, 6);
            let sb = seq(1, &b, 6);
            let (ab_s, ab_d) = compute_raw_counts(&sa, &sb);
            let (ba_s, ba_d) = compute_raw_counts(&sb, &sa);
            prop_assert_eq!(&ab_s.within, &ba_d.within);
            prop_assert_eq!(&ab_s.cross, &ba_d.cross);
            prop_assert_eq!(&ab_d.within, &ba_s.within);
            // within >= 1 on valid slots, zero on padding
            for (i, slot) in sa.entries.iter().enumerate() {
                if slot.valid { prop_assert!(ab_s.within[i] >= 1) } else { prop_assert_eq!(ab_s.within[i], 0) }
            }
        }

        #[test]
        fn vocabulary_monotone_in_threshold(counts in prop::collection::vec(0u32..8, 0..200), lo in 1u64..10, extra in 0u64..10) {
            let small = CountVocabulary::build(counts.iter().copied(), lo + extra);
            let large = CountVocabulary::build(counts.iter().copied(), lo);
            prop_assert!(small.size() <= large.size());
            let ordered: Vec<u32> = large.table.keys().map(|&c| large.lookup(c)).collect();
            prop_assert_eq!(ordered, (1..=large.table.len() as u32).collect::<Vec<_>>());
        }
    }
}

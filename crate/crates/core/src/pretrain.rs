//! Contrastive link pretraining: in-batch InfoNCE over normalized summary
//! embeddings with historical false-negative masking, an on-disk batch
//! cache, and MRR-based early stopping.

use std::collections::BTreeSet;
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{encode, Mode, Model};
use crate::error::{Error, Result};
use crate::features::{assemble_bundles, CountVocabs, FeatureMatrices, TokenBundle};
use crate::graph::{NeighborSequence, NeighborSlot, NodeId, TemporalGraph};
use crate::params::{AdamW, AdamWConfig, ParamStore};
use crate::schedule::EarlyStopping;
use crate::tape::{Mat, Tape, Var};

/// Row-major `N × N` boolean matrix; `true` marks a usable candidate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn all(n: usize) -> Self {
        Self {
            n,
            bits: vec![true; n * n],
        }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.bits[i * self.n + j] = value;
    }

    pub fn rows(&self) -> Vec<Vec<bool>> {
        self.bits.chunks(self.n.max(1)).map(<[bool]>::to_vec).collect()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; (self.bits.len()).div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    fn from_bytes(n: usize, bytes: &[u8]) -> Self {
        let bits = (0..n * n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
        Self { n, bits }
    }
}

/// `M[i][j] = false` for `i != j` when `u_i` and `v_j` interacted before
/// the earliest timestamp in the batch, or when `v_j == v_i`.
pub fn build_false_negative_mask(queries: &[(NodeId, NodeId, f64)], graph: &TemporalGraph) -> Mask {
    let n = queries.len();
    let t_min = queries.iter().map(|q| q.2).fold(f64::INFINITY, f64::min);
    let mut mask = Mask::all(n);
    for (i, &(u, v_i, _)) in queries.iter().enumerate() {
        let hist: BTreeSet<NodeId> = graph.historical_neighbor_set(u, t_min);
        for (j, &(_, v_j, _)) in queries.iter().enumerate() {
            if i != j && (hist.contains(&v_j) || v_j == v_i) {
                mask.set(i, j, false);
            }
        }
    }
    mask
}

/// `logits[i][j] = cos(z_u[i], z_v[j]) / tau`, unmasked.
pub fn similarity_logits(z_u: &Mat, z_v: &Mat, tau: f64) -> Result<Mat> {
    let norm = |m: &Mat| -> Result<Mat> {
        let mut out = m.clone();
        for (i, mut r) in out.rows_mut().into_iter().enumerate() {
            let n = r.dot(&r).sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("embedding row {i} has degenerate norm {n}")));
            }
            r /= n;
        }
        Ok(out)
    };
    Ok(norm(z_u)?.dot(&norm(z_v)?.t()) / tau)
}

/// Loss on the tape; `z_u`, `z_v` are `N × D`.
pub fn tclp_loss(tape: &mut Tape, z_u: Var, z_v: Var, mask: &Mask, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let s = tape.l2_normalize_rows(z_u)?;
    let d = tape.l2_normalize_rows(z_v)?;
    let logits = tape.matmul_nt(s, d);
    let logits = tape.scale(logits, 1.0 / tau);
    let n = mask.size();
    let targets: Vec<usize> = (0..n).collect();
    tape.cross_entropy(logits, &targets, Some(&mask.rows()))
}

/// Loss value without gradients.
pub fn tclp_loss_value(z_u: &Mat, z_v: &Mat, mask: &Mask, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let u = tape.constant(z_u.clone());
    let v = tape.constant(z_v.clone());
    let l = tclp_loss(&mut tape, u, v, mask, tau)?;
    Ok(tape.scalar(l))
}

/// Mean reciprocal rank of the diagonal among unmasked entries of each row.
/// Ties count against the true entry.
pub fn mrr_from_logits(logits: &Mat, mask: &Mask) -> f64 {
    let n = logits.nrows();
    if n == 0 {
        return 0.0;
    }
    let total: f64 = (0..n)
        .map(|i| {
            let own = logits[[i, i]];
            let ahead = (0..n)
                .filter(|&j| j != i && mask.get(i, j) && logits[[i, j]] >= own)
                .count();
            1.0 / (1 + ahead) as f64
        })
        .sum();
    total / n as f64
}

pub fn batch_mrr(z_u: &Mat, z_v: &Mat, mask: &Mask, tau: f64) -> Result<f64> {
    Ok(mrr_from_logits(&similarity_logits(z_u, z_v, tau)?, mask))
}

/// `(1/N) Σ_{i=1..N} 1/i`: expected MRR when the true entry's rank is
/// uniform over `N` candidates.
pub fn uniform_mrr_baseline(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum::<f64>() / n as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchPair {
    pub u: NodeId,
    pub v: NodeId,
    pub edge_id: u32,
    pub t: f64,
    pub src: NeighborSequence,
    pub dst: NeighborSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub pairs: Vec<BatchPair>,
    pub mask: Mask,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn t_min(&self) -> f64 {
        self.pairs.iter().map(|p| p.t).fold(f64::INFINITY, f64::min)
    }

    pub fn queries(&self) -> Vec<(NodeId, NodeId, f64)> {
        self.pairs.iter().map(|p| (p.u, p.v, p.t)).collect()
    }

    pub fn bundles(&self, feats: &FeatureMatrices, vocabs: &CountVocabs) -> Result<Vec<(TokenBundle, TokenBundle)>> {
        self.pairs
            .iter()
            .map(|p| assemble_bundles(feats, &p.src, &p.dst, vocabs, (p.u, p.v, p.t)))
            .collect()
    }
}

/// Consecutive chronological batches over `range`; the last one may be short.
pub fn precompute_batches(
    graph: &TemporalGraph,
    range: Range<usize>,
    k: usize,
    batch_size: usize,
) -> Result<Vec<ContrastiveBatch>> {
    if range.is_empty() {
        return Err(Error::Invalid("cannot build batches from an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let events = &graph.events()[range];
    Ok(events
        .chunks(batch_size)
        .map(|chunk| {
            let pairs: Vec<BatchPair> = chunk
                .iter()
                .map(|e| BatchPair {
                    u: e.src,
                    v: e.dst,
                    edge_id: e.edge_id,
                    t: e.timestamp,
                    src: graph.sample_recent_neighbors(e.src, e.timestamp, k),
                    dst: graph.sample_recent_neighbors(e.dst, e.timestamp, k),
                })
                .collect();
            let queries: Vec<_> = pairs.iter().map(|p| (p.u, p.v, p.t)).collect();
            let mask = build_false_negative_mask(&queries, graph);
            ContrastiveBatch { pairs, mask }
        })
        .collect())
}

/// Identifies the inputs a cache was built from.
pub fn cache_digest(graph: &TemporalGraph, range: &Range<usize>, k: usize, batch_size: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"dgnb-cache");
    for x in [k as u64, batch_size as u64, range.start as u64, range.end as u64, graph.num_nodes() as u64] {
        h.update(x.to_le_bytes());
    }
    for e in graph.events() {
        h.update(e.edge_id.to_le_bytes());
        h.update(e.src.to_le_bytes());
        h.update(e.dst.to_le_bytes());
        h.update(e.timestamp.to_le_bytes());
    }
    h.finalize().into()
}

const CACHE_MAGIC: &[u8; 4] = b"DGNB";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchCache {
    pub digest: [u8; 32],
    /// Neighbor slots per sequence (`k - 1`).
    pub slots: u32,
    pub batches: Vec<ContrastiveBatch>,
}

fn put_slot(out: &mut Vec<u8>, s: &NeighborSlot) {
    out.extend_from_slice(&s.neighbor.to_le_bytes());
    out.extend_from_slice(&s.edge_id.to_le_bytes());
    out.extend_from_slice(&s.timestamp.to_le_bytes());
    out.push(s.valid as u8);
}

impl BatchCache {
    /// `DGNB | version u32 | digest [32] | batch_count u64 | slots u32`, then
    /// per batch `N u32`, `N` pair records and `ceil(N²/8)` mask bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CACHE_MAGIC);
        out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.batches.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.slots.to_le_bytes());
        for b in &self.batches {
            let n = u32::try_from(b.len()).map_err(|_| Error::Invalid("batch exceeds u32 pairs".into()))?;
            out.extend_from_slice(&n.to_le_bytes());
            for p in &b.pairs {
                if p.src.entries.len() != self.slots as usize || p.dst.entries.len() != self.slots as usize {
                    return Err(Error::Invalid("sequence length does not match cache header".into()));
                }
                out.extend_from_slice(&p.u.to_le_bytes());
                out.extend_from_slice(&p.v.to_le_bytes());
                out.extend_from_slice(&p.edge_id.to_le_bytes());
                out.extend_from_slice(&p.t.to_le_bytes());
                for s in p.src.entries.iter().chain(&p.dst.entries) {
                    put_slot(&mut out, s);
                }
            }
            out.extend_from_slice(&b.mask.to_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        if r.take(4)? != CACHE_MAGIC {
            return Err(Error::format(path, "not a batch cache (bad magic)"));
        }
        let version = r.u32()?;
        if version != CACHE_VERSION {
            return Err(Error::format(path, format!("unsupported cache version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u64()?;
        let slots = r.u32()?;
        let mut batches = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let mut pairs = Vec::with_capacity(n);
            for _ in 0..n {
                let u = r.u32()?;
                let v = r.u32()?;
                let edge_id = r.u32()?;
                let t = r.f64()?;
                let mut seq = |node: NodeId| -> Result<NeighborSequence> {
                    let entries = (0..slots)
                        .map(|_| {
                            Ok(NeighborSlot {
                                neighbor: r.u32()?,
                                edge_id: r.u32()?,
                                timestamp: r.f64()?,
                                valid: r.take(1)?[0] != 0,
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Ok(NeighborSequence {
                        node,
                        query_time: t,
                        entries,
                    })
                };
                let src = seq(u)?;
                let dst = seq(v)?;
                pairs.push(BatchPair { u, v, edge_id, t, src, dst });
            }
            let mask = Mask::from_bytes(n, r.take((n * n).div_ceil(8))?);
            batches.push(ContrastiveBatch { pairs, mask });
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last batch"));
        }
        Ok(Self { digest, slots, batches })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.path, "unexpected end of file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mrr: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Parameters at the best validation MRR.
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_mrr: f64,
    pub history: Vec<PretrainEpoch>,
}

type Prepared = (Vec<(TokenBundle, TokenBundle)>, Mask);

fn prepare(batches: &[ContrastiveBatch], feats: &FeatureMatrices, vocabs: &CountVocabs) -> Result<Vec<Prepared>> {
    batches
        .iter()
        .map(|b| Ok((b.bundles(feats, vocabs)?, b.mask.clone())))
        .collect()
}

/// Mean of per-batch MRRs in independent mode without dropout.
pub fn evaluate_mrr(model: &Model, batches: &[Prepared], tau: f64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Invalid("no validation batches".into()));
    }
    let mut total = 0.0;
    for (pairs, mask) in batches {
        let (u, v) = crate::encoder::embed(model, pairs, Mode::Independent)?;
        total += batch_mrr(&u, &v, mask, tau)?;
    }
    Ok(total / batches.len() as f64)
}

/// Trains `model` in place with chronological batch order and returns the
/// best-validation parameters.
pub fn pretrain_loop<R: Rng>(
    model: &mut Model,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    train: &[ContrastiveBatch],
    val: &[ContrastiveBatch],
    cfg: &PretrainConfig,
    dropout_rng: &mut R,
) -> Result<PretrainOutcome> {
    if train.is_empty() {
        return Err(Error::Invalid("no training batches".into()));
    }
    let train = prepare(train, feats, vocabs)?;
    let val = prepare(val, feats, vocabs)?;
    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut stopper = EarlyStopping::new(0, cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        for (step, (pairs, mask)) in train.iter().enumerate() {
            let mut tape = Tape::new();
            let enc = encode(&mut tape, model, pairs, Mode::Independent, Some(&mut *dropout_rng))?;
            let loss = tclp_loss(&mut tape, enc.z_u, enc.z_v, mask, cfg.tau)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Numeric(format!("epoch {epoch} step {step}: loss is {value}")));
            }
            loss_sum += value;
            let grads = tape.backward(loss);
            opt.update(&mut model.params, &tape.param_grads(&grads));
        }
        if !model.params.all_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: parameters became non-finite")));
        }
        let val_mrr = evaluate_mrr(model, &val, cfg.tau)?;
        let train_loss = loss_sum / train.len() as f64;
        log::info!("pretrain epoch {epoch}: loss {train_loss:.4} val mrr {val_mrr:.4}");
        history.push(PretrainEpoch {
            epoch,
            train_loss,
            val_mrr,
        });
        let verdict = stopper.observe(val_mrr);
        if verdict.improved {
            best = model.params.clone();
        }
        if verdict.stop {
            break;
        }
    }
    model.params = best.clone();
    Ok(PretrainOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        best_val_mrr: stopper.best().unwrap_or(0.0),
        history,
    })
}

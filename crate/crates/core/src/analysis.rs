//! Role-asymmetry probes: compare how a node is represented when it plays
//! the source role in `(u, v)` and the destination role in `(v, u)`.

use serde::{Deserialize, Serialize};

use crate::encoder::{encode, token_row, Mode, Model};
use crate::error::Result;
use crate::features::{assemble_bundles, CountVocabs, FeatureMatrices, Role, TokenBundle};
use crate::graph::{EdgeEvent, TemporalGraph};
use crate::rng::{stream_rng, Stream};
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeKind {
    /// Final pooled embeddings.
    Global,
    /// Frequency-channel output of the query token, before the transformer.
    Structural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsymmetryReport {
    pub probe: ProbeKind,
    pub num_samples: usize,
    /// Samples dropped because one of the vectors had zero norm.
    pub num_skipped: usize,
    pub mean_score: f64,
    pub std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

/// `1 - cos(a, b)`, or `None` when either vector has zero norm.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>();
    let nb = b.iter().map(|x| x * x).sum::<f64>();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    // One square root of the product keeps `a == b` exactly at zero.
    Some((1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0))
}

fn bundles_for(
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    k: usize,
    u: u32,
    v: u32,
    t: f64,
) -> Result<(TokenBundle, TokenBundle)> {
    let s = graph.sample_recent_neighbors(u, t, k);
    let d = graph.sample_recent_neighbors(v, t, k);
    assemble_bundles(feats, &s, &d, vocabs, (u, v, t))
}

/// Per-edge vectors `(h1, h2)` for one probe, batched.
fn probe_vectors(
    model: &Model,
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    edges: &[EdgeEvent],
    kind: ProbeKind,
    mode: Mode,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    const CHUNK: usize = 256;
    let k = model.config.max_seq_len;
    let mut out = Vec::with_capacity(edges.len());
    for chunk in edges.chunks(CHUNK) {
        let mut forward = Vec::with_capacity(chunk.len());
        let mut swapped = Vec::with_capacity(chunk.len());
        for e in chunk {
            forward.push(bundles_for(graph, feats, vocabs, k, e.src, e.dst, e.timestamp)?);
            swapped.push(bundles_for(graph, feats, vocabs, k, e.dst, e.src, e.timestamp)?);
        }
        let run = |pairs: &[(TokenBundle, TokenBundle)]| -> Result<(Mat, Mat, Mat)> {
            let mut tape = Tape::new();
            let enc = encode::<rand_chacha::ChaCha8Rng>(&mut tape, model, pairs, mode, None)?;
            Ok((
                tape.value(enc.z_u).clone(),
                tape.value(enc.z_v).clone(),
                tape.value(enc.freq).clone(),
            ))
        };
        let (fu, _, ff) = run(&forward)?;
        let (_, sv, sf) = run(&swapped)?;
        let b = chunk.len();
        for i in 0..b {
            let pair = match kind {
                ProbeKind::Global => (fu.row(i).to_vec(), sv.row(i).to_vec()),
                ProbeKind::Structural => (
                    ff.row(token_row(Role::Source, i, 0, b, k)).to_vec(),
                    sf.row(token_row(Role::Destination, i, 0, b, k)).to_vec(),
                ),
            };
            out.push(pair);
        }
    }
    Ok(out)
}

/// Scores every edge in `edges`. The swapped query reuses the original
/// timestamp so both encodings see the same histories.
#[allow(clippy::too_many_arguments)]
pub fn asymmetry(
    model: &Model,
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    edges: &[EdgeEvent],
    kind: ProbeKind,
    mode: Mode,
    keep_scores: bool,
) -> Result<AsymmetryReport> {
    let vectors = probe_vectors(model, graph, feats, vocabs, edges, kind, mode)?;
    let scores: Vec<f64> = vectors
        .iter()
        .filter_map(|(a, b)| cosine_distance(a, b))
        .collect();
    let n = scores.len();
    let mean = if n > 0 { scores.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let std = if n > 1 {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(AsymmetryReport {
        probe: kind,
        num_samples: n,
        num_skipped: vectors.len() - n,
        mean_score: mean,
        std,
        scores: keep_scores.then_some(scores),
    })
}

pub fn global_asymmetry(
    model: &Model,
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    edges: &[EdgeEvent],
    mode: Mode,
) -> Result<AsymmetryReport> {
    asymmetry(model, graph, feats, vocabs, edges, ProbeKind::Global, mode, false)
}

pub fn structural_probe_asymmetry(
    model: &Model,
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    edges: &[EdgeEvent],
) -> Result<AsymmetryReport> {
    asymmetry(model, graph, feats, vocabs, edges, ProbeKind::Structural, Mode::Independent, false)
}

/// Up to `n` events drawn without replacement, kept in chronological
/// order. Returns all of them when there are at most `n`.
pub fn sample_edges(events: &[EdgeEvent], n: usize, seed: u64) -> Vec<EdgeEvent> {
    if events.len() <= n {
        return events.to_vec();
    }
    let mut rng = stream_rng(seed, Stream::Probe);
    let mut idx = rand::seq::index::sample(&mut rng, events.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| events[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_identities() {
        assert_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]), Some(0.0));
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, -2.0], &[-1.0, 2.0]).unwrap() - 2.0).abs() < 1e-15);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn report_json_round_trip() {
        let r = AsymmetryReport {
            probe: ProbeKind::Structural,
            num_samples: 2,
            num_skipped: 0,
            mean_score: 0.25,
            std: 0.1,
            scores: Some(vec![0.2, 0.3]),
        };
        let back: AsymmetryReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }
}

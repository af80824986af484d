//! Synthetic directed temporal graphs whose labels depend on which role a
//! node played in its recent history.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrices;
use crate::finetune::LabelMeta;
use crate::graph::{write_edges_csv, EdgeEvent, NodeId};
use crate::rng::{stream_rng, Stream};
use crate::tape::Mat;

/// Sliding window of recent events that drives preferential sampling.
pub const ACTIVITY_WINDOW: usize = 50;
/// How many of a node's latest events decide whether it counts as a
/// habitual source.
pub const ROLE_MEMORY: usize = 3;

pub const EDGES_FILE: &str = "edges.csv";
pub const LABELS_FILE: &str = "labels.json";
pub const LATENTS_FILE: &str = "latents.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub num_nodes: usize,
    pub num_edges: usize,
    pub num_classes: usize,
    pub seed: u64,
    /// Probability that a label follows the planted rule instead of noise.
    pub beta: f64,
    pub d_node: usize,
    pub d_edge: usize,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 classes".into()));
        }
        if self.num_nodes < 2 {
            return Err(Error::Config("synthetic data needs at least 2 nodes".into()));
        }
        if self.num_edges < self.num_nodes {
            return Err(Error::Config("num_edges must be at least num_nodes".into()));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta must lie in [0, 1], got {}", self.beta)));
        }
        if self.d_node < 2 * self.num_classes {
            return Err(Error::Config(format!(
                "d_node must hold two {}-way one-hots",
                self.num_classes
            )));
        }
        if self.d_edge < self.num_classes {
            return Err(Error::Config(format!("d_edge must hold a {}-way one-hot", self.num_classes)));
        }
        if self.num_edges > u32::MAX as usize || self.num_nodes > u32::MAX as usize {
            return Err(Error::Config("synthetic graph exceeds u32 ids".into()));
        }
        Ok(())
    }
}

/// Hidden per-node types used to plant labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latents {
    pub source_type: Vec<u32>,
    pub destination_type: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub config: SynthConfig,
    pub events: Vec<EdgeEvent>,
    pub feats: FeatureMatrices,
    pub meta: LabelMeta,
    pub latents: Latents,
}

/// Draws a node with probability proportional to `1 + appearances in the
/// window`: the first `n` tickets are one per node, the rest one per
/// endpoint in the window.
fn draw_node(rng: &mut impl Rng, n: usize, window: &VecDeque<(NodeId, NodeId)>) -> NodeId {
    let r = rng.random_range(0..n + 2 * window.len());
    if r < n {
        r as NodeId
    } else {
        let (a, b) = window[(r - n) / 2];
        if (r - n) % 2 == 0 {
            a
        } else {
            b
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, Stream::Synth);
    let (n, c) = (cfg.num_nodes, cfg.num_classes as u32);
    let source_type: Vec<u32> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let destination_type: Vec<u32> = (0..n).map(|_| rng.random_range(0..c)).collect();

    let mut window: VecDeque<(NodeId, NodeId)> = VecDeque::with_capacity(ACTIVITY_WINDOW);
    let mut roles: Vec<VecDeque<bool>> = vec![VecDeque::with_capacity(ROLE_MEMORY); n];
    let mut last_label: HashMap<(NodeId, NodeId), u32> = HashMap::new();
    let mut events = Vec::with_capacity(cfg.num_edges);
    let mut edge = Mat::zeros((cfg.num_edges, cfg.d_edge));

    for i in 0..cfg.num_edges {
        let u = draw_node(&mut rng, n, &window);
        let mut v = draw_node(&mut rng, n, &window);
        while v == u {
            v = draw_node(&mut rng, n, &window);
        }
        let habitual_source = roles[u as usize].len() == ROLE_MEMORY && roles[u as usize].iter().all(|&s| s);
        let label = if rng.random::<f64>() < cfg.beta {
            if habitual_source {
                source_type[u as usize]
            } else {
                destination_type[v as usize]
            }
        } else {
            rng.random_range(0..c)
        };
        if let Some(&prev) = last_label.get(&(u, v)) {
            edge[[i, prev as usize]] = 1.0;
        }
        last_label.insert((u, v), label);
        events.push(EdgeEvent {
            edge_id: i as u32,
            src: u,
            dst: v,
            timestamp: (i + 1) as f64,
            label: Some(label),
        });

        for (node, as_source) in [(u, true), (v, false)] {
            let r = &mut roles[node as usize];
            if r.len() == ROLE_MEMORY {
                r.pop_front();
            }
            r.push_back(as_source);
        }
        if window.len() == ACTIVITY_WINDOW {
            window.pop_front();
        }
        window.push_back((u, v));
    }

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut node = Mat::zeros((n, cfg.d_node));
    for i in 0..n {
        node[[i, source_type[i] as usize]] = 1.0;
        node[[i, cfg.num_classes + destination_type[i] as usize]] = 1.0;
        for j in 0..2 * cfg.num_classes {
            node[[i, j]] += noise.sample(&mut rng);
        }
    }

    Ok(SynthData {
        config: *cfg,
        events,
        feats: FeatureMatrices { node, edge },
        meta: LabelMeta {
            num_classes: cfg.num_classes,
            class_names: None,
        },
        latents: Latents {
            source_type,
            destination_type,
        },
    })
}

impl SynthData {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_edges_csv(&dir.join(EDGES_FILE), &self.events)?;
        self.feats.save_dir(dir)?;
        self.meta.save(&dir.join(LABELS_FILE))?;
        let p = dir.join(LATENTS_FILE);
        std::fs::write(&p, serde_json::to_string(&self.latents)?).map_err(|e| Error::io(&p, e))
    }
}

/// Predicts every label by replaying the planted rule with the true latents,
/// scanning each source's full history from scratch.
pub fn replay_oracle(events: &[EdgeEvent], latents: &Latents) -> Vec<u32> {
    events
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let recent: Vec<bool> = events[..i]
                .iter()
                .rev()
                .filter(|p| p.src == e.src || p.dst == e.src)
                .take(ROLE_MEMORY)
                .map(|p| p.src == e.src)
                .collect();
            if recent.len() == ROLE_MEMORY && recent.iter().all(|&s| s) {
                latents.source_type[e.src as usize]
            } else {
                latents.destination_type[e.dst as usize]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(beta: f64) -> SynthConfig {
        SynthConfig {
            num_nodes: 30,
            num_edges: 400,
            num_classes: 3,
            seed: 7,
            beta,
            d_node: 8,
            d_edge: 4,
        }
    }

    #[test]
    fn timestamps_are_one_to_e() {
        let d = generate(&small(0.5)).unwrap();
        for (i, e) in d.events.iter().enumerate() {
            assert_eq!(e.timestamp, (i + 1) as f64);
            assert_ne!(e.src, e.dst);
        }
    }

    #[test]
    fn rejects_too_few_edges() {
        let mut c = small(0.5);
        c.num_edges = 10;
        assert!(generate(&c).is_err());
    }

    #[test]
    fn edge_rows_hold_only_earlier_labels() {
        let d = generate(&small(0.9)).unwrap();
        let mut seen: HashMap<(NodeId, NodeId), u32> = HashMap::new();
        for (i, e) in d.events.iter().enumerate() {
            let row = d.feats.edge.row(i);
            match seen.get(&(e.src, e.dst)) {
                Some(&l) => {
                    assert_eq!(row.sum(), 1.0);
                    assert_eq!(row[l as usize], 1.0);
                }
                None => assert_eq!(row.sum(), 0.0),
            }
            seen.insert((e.src, e.dst), e.label.unwrap());
        }
    }
}

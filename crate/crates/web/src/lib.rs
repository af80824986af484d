//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every export takes and returns plain numbers, vectors, or JSON strings so
//! the same functions run natively in tests.

use rolegraph::analysis::{global_asymmetry, sample_edges, structural_probe_asymmetry};
use rolegraph::encoder::{encode_time, EncoderConfig, Mode, Model};
use rolegraph::features::CountVocabs;
use rolegraph::graph::{SplitSpec, TemporalGraph};
use rolegraph::params::normal;
use rolegraph::pretrain::{batch_mrr, tclp_loss_value, uniform_mrr_baseline, Mask};
use rolegraph::rng::{stream_rng, Stream};
use rolegraph::synth::{generate, SynthConfig};
use serde_json::json;
use wasm_bindgen::prelude::*;

/// Time-encoding values for `points` evenly spaced deltas in
/// `[0, max_delta]`, row-major `points × d_t`.
#[wasm_bindgen]
pub fn time_encoding_curves(d_t: usize, max_delta: f64, points: usize) -> Vec<f64> {
    let d_t = d_t.max(1);
    let points = points.max(2);
    let deltas: Vec<f64> = (0..points)
        .map(|i| max_delta * i as f64 / (points - 1) as f64)
        .collect();
    let w = rolegraph::encoder::time_frequencies(d_t);
    encode_time(&deltas, &w, &vec![0.0; d_t]).into_raw_vec_and_offset().0
}

#[wasm_bindgen]
pub fn time_frequencies(d_t: usize) -> Vec<f64> {
    rolegraph::encoder::time_frequencies(d_t.max(1))
}

/// Asymmetry scores of a randomly initialized encoder on a small synthetic
/// graph, with each role-aware component switchable. Returns JSON.
#[wasm_bindgen]
pub fn asymmetry_demo(use_nfe: bool, use_rspe: bool, use_dual_cls: bool, seed: u64, samples: usize) -> String {
    match asymmetry_json(use_nfe, use_rspe, use_dual_cls, seed, samples) {
        Ok(v) => v.to_string(),
        Err(e) => json!({ "error": e.to_string() }).to_string(),
    }
}

fn asymmetry_json(
    use_nfe: bool,
    use_rspe: bool,
    use_dual_cls: bool,
    seed: u64,
    samples: usize,
) -> rolegraph::Result<serde_json::Value> {
    let data = generate(&SynthConfig {
        num_nodes: 40,
        num_edges: 600,
        num_classes: 3,
        seed,
        beta: 0.9,
        d_node: 6,
        d_edge: 3,
    })?;
    let rows = data.events.iter().map(|e| (e.src, e.dst, e.timestamp, e.label));
    let graph = TemporalGraph::from_rows(rows, Some(40))?;
    let splits = graph.chronological_split(SplitSpec::default())?;
    let k = 6;
    let vocabs = CountVocabs::build(&graph, splits.train.clone(), k, 5);
    let config = EncoderConfig {
        d_c: 8,
        d_t: 8,
        d_node: 6,
        d_edge: 3,
        layers: 1,
        heads: 2,
        dropout: 0.0,
        max_seq_len: k,
        use_nfe,
        use_rspe,
        use_dual_cls,
        vocab_sizes: [1; 4],
    }
    .with_vocabs(&vocabs);
    let model = Model::new(config, &mut stream_rng(seed, Stream::Init))?;
    let edges = sample_edges(&graph.events()[splits.test.clone()], samples.clamp(1, 90), seed);
    let feats = &data.feats;
    let independent = global_asymmetry(&model, &graph, feats, &vocabs, &edges, Mode::Independent)?;
    let joint = global_asymmetry(&model, &graph, feats, &vocabs, &edges, Mode::Joint)?;
    let structural = structural_probe_asymmetry(&model, &graph, feats, &vocabs, &edges)?;
    Ok(json!({
        "edges": edges.len(),
        "global_independent": independent.mean_score,
        "global_joint": joint.mean_score,
        "structural": structural.mean_score,
    }))
}

/// Contrastive loss and MRR against temperature for `n` noisy positive
/// pairs: `z_v = z_u + noise * N(0, 1)`. Returns a JSON array.
#[wasm_bindgen]
pub fn temperature_sweep(n: usize, dim: usize, noise: f64, seed: u64) -> String {
    let (n, dim) = (n.clamp(2, 512), dim.clamp(1, 256));
    let mut rng = stream_rng(seed, Stream::Probe);
    let z_u = normal(&mut rng, n, dim, 1.0);
    let z_v = &z_u + &normal(&mut rng, n, dim, noise.max(1e-9));
    let mask = Mask::all(n);
    let rows: Vec<serde_json::Value> = (0..=24)
        .map(|i| {
            let tau = 10f64.powf(-2.0 + 2.0 * i as f64 / 24.0);
            let loss = tclp_loss_value(&z_u, &z_v, &mask, tau).unwrap_or(f64::NAN);
            let mrr = batch_mrr(&z_u, &z_v, &mask, tau).unwrap_or(f64::NAN);
            json!({ "tau": tau, "loss": loss, "mrr": mrr })
        })
        .collect();
    json!({ "uniform_mrr": uniform_mrr_baseline(n), "uniform_loss": (n as f64).ln(), "points": rows }).to_string()
}

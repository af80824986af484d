//! Flat run configuration with JSON file loading and `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::graph::SplitSpec;
use crate::pretrain::PretrainConfig;
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub d_c: usize,
    pub d_t: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub use_nfe: bool,
    pub use_rspe: bool,
    pub use_dual_cls: bool,
    pub n_min: u64,

    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub pretrain_patience: usize,
    pub pretrain_max_epochs: usize,

    pub train_budget: usize,
    pub val_budget: usize,
    pub grace_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,

    pub train_end: f64,
    pub val_end: f64,

    pub synth_nodes: usize,
    pub synth_edges: usize,
    pub synth_classes: usize,
    pub synth_beta: f64,
    pub synth_d_node: usize,
    pub synth_d_edge: usize,

    pub probe_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            d_c: 50,
            d_t: 100,
            layers: 2,
            heads: 2,
            dropout: 0.1,
            max_seq_len: 10,
            use_nfe: true,
            use_rspe: true,
            use_dual_cls: true,
            n_min: 10_000,
            lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 256,
            tau: 0.07,
            pretrain_patience: 5,
            pretrain_max_epochs: 100,
            train_budget: 10_000,
            val_budget: 1_500,
            grace_epochs: 5,
            patience: 5,
            max_epochs: 100,
            train_end: 0.70,
            val_end: 0.85,
            synth_nodes: 200,
            synth_edges: 5_000,
            synth_classes: 4,
            synth_beta: 0.9,
            synth_d_node: 8,
            synth_d_edge: 4,
            probe_samples: 1_000,
        }
    }
}

/// Parses the right-hand side of `key=value`: JSON if it parses, otherwise
/// a bare string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then each `key=value`
    /// override in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let from_file: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let Value::Object(map) = from_file else {
                return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
            };
            for (k, v) in map {
                set_key(&mut value, &k, v)?;
            }
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_key(&mut value, k.trim(), parse_value(v.trim()))?;
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.split().validate()?;
        if !(self.tau > 0.0) || !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config("tau and lr must be positive, weight_decay non-negative".into()));
        }
        if self.batch_size == 0 || self.n_min == 0 {
            return Err(Error::Config("batch_size and n_min must be positive".into()));
        }
        Ok(())
    }

    pub fn split(&self) -> SplitSpec {
        SplitSpec {
            train_end: self.train_end,
            val_end: self.val_end,
        }
    }

    /// Encoder settings; vocabulary sizes are filled in later.
    pub fn encoder(&self, d_node: usize, d_edge: usize) -> EncoderConfig {
        EncoderConfig {
            d_c: self.d_c,
            d_t: self.d_t,
            d_node,
            d_edge,
            layers: self.layers,
            heads: self.heads,
            dropout: self.dropout,
            max_seq_len: self.max_seq_len,
            use_nfe: self.use_nfe,
            use_rspe: self.use_rspe,
            use_dual_cls: self.use_dual_cls,
            vocab_sizes: [1; 4],
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            tau: self.tau,
            patience: self.pretrain_patience,
            max_epochs: self.pretrain_max_epochs,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            train_budget: self.train_budget,
            val_budget: self.val_budget,
            grace_epochs: self.grace_epochs,
            patience: self.patience,
            max_epochs: self.max_epochs,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_nodes: self.synth_nodes,
            num_edges: self.synth_edges,
            num_classes: self.synth_classes,
            seed: self.seed,
            beta: self.synth_beta,
            d_node: self.synth_d_node,
            d_edge: self.synth_d_edge,
        }
    }
}

fn set_key(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let map = root.as_object_mut().expect("config serializes to an object");
    if !map.contains_key(key) {
        return Err(Error::Config(format!("unknown configuration key `{key}`")));
    }
    map.insert(key.to_string(), v);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::load(None, &["d_c=6".into(), "use_rspe=false".into()]).unwrap();
        assert_eq!(c.d_c, 6);
        assert!(!c.use_rspe);
        assert_eq!(c.tau, 0.07);
        assert_eq!(c.batch_size, 256);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::load(None, &["d_model=6".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::load(None, &["d_c=abc".into()]), Err(Error::Config(_))));
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"lr": 0.001, "layers": 1}"#).unwrap();
        let c = RunConfig::load(Some(&p), &["layers=3".into()]).unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.layers, 3);
        std::fs::write(&p, r#"{"nope": 1}"#).unwrap();
        assert!(RunConfig::load(Some(&p), &[]).is_err());
    }
}

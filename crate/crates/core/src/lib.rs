//! Role-aware transformer encoding for directed temporal graphs.
//!
//! The pipeline runs from a chronological edge stream ([`graph`]) through
//! per-token features ([`features`]) into a transformer that keeps source
//! and destination roles apart ([`encoder`]). The encoder is pretrained
//! contrastively on unlabeled edges ([`pretrain`]), finetuned for edge
//! classification ([`finetune`]), and inspected with swap probes
//! ([`analysis`]).

pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod encoder;
pub mod error;
pub mod features;
pub mod finetune;
pub mod graph;
pub mod params;
pub mod pretrain;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod tape;

pub use error::{Error, Result};

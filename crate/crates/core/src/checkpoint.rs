//! Versioned binary container of named tensors.
//!
//! Layout (little-endian):
//! `DGNC | version u32 | seed u64 | meta_len u64 | meta JSON | count u64`
//! followed by `count` records of
//! `name_len u32 | name | ndim u32 | dims u64* | data f32*`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Model};
use crate::error::{Error, Result};
use crate::features::CountVocabs;
use crate::params::ParamStore;
use crate::tape::Mat;

const MAGIC: &[u8; 4] = b"DGNC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Init,
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub encoder: EncoderConfig,
    pub vocab: CountVocabs,
    /// Echo of the run configuration that produced the checkpoint.
    pub run_config: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub seed: u64,
    pub meta: CheckpointMeta,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.meta.encoder.clone(),
            params: self.params.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::with_capacity(64 + meta.len() + self.params.num_scalars() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, value) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for &x in value.iter() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
        }
        let seed = r.u64()?;
        let meta_len = r.u64()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let dims: Vec<usize> = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match dims.as_slice() {
                [n] => (1, *n),
                [r0, c0] => (*r0, *c0),
                _ => return Err(Error::format(path, format!("tensor {name} has rank {ndim}"))),
            };
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::format(path, "tensor shape overflow"))?;
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(path, "tensor too large"))?)?;
            let data: Vec<f64> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            params.add(name, Mat::from_shape_vec((rows, cols), data).expect("shape checked"));
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last tensor"));
        }
        Ok(Self { seed, meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
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
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::CountVocabulary;
    use rand::SeedableRng;

    fn sample() -> Checkpoint {
        let vocab = CountVocabs {
            unk_index: 0,
            src_within: CountVocabulary::build([1, 1, 2], 1),
            src_cross: CountVocabulary::build([0], 1),
            dst_within: CountVocabulary::build([1], 1),
            dst_cross: CountVocabulary::build([0, 3], 1),
        };
        let cfg = EncoderConfig {
            d_c: 2,
            d_t: 2,
            d_node: 3,
            d_edge: 1,
            layers: 1,
            heads: 2,
            dropout: 0.1,
            max_seq_len: 3,
            use_nfe: true,
            use_rspe: true,
            use_dual_cls: true,
            vocab_sizes: [0; 4],
        }
        .with_vocabs(&vocab);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(cfg, &mut rng).unwrap();
        Checkpoint {
            seed: 42,
            meta: CheckpointMeta {
                stage: Stage::Pretrain,
                encoder: model.config.clone(),
                vocab,
                run_config: serde_json::json!({"d_c": 2}),
            },
            params: model.params,
        }
    }

    #[test]
    fn round_trip_is_f32_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"DGNC");
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.seed, 42);
        assert_eq!(back.meta, ck.meta);
        for ((n1, v1), (n2, v2)) in ck.params.iter().zip(back.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.dim(), v2.dim());
            for (a, b) in v1.iter().zip(v2.iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
        // A second save of the reloaded checkpoint is byte-identical.
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 3], Path::new("mem"));
        assert!(matches!(err, Err(Error::Format { .. })));
    }
}

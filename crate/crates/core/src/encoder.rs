//! The role-aware sequence encoder: five-channel feature fusion, role
//! positional vectors, dual summary tokens, and a pre-norm transformer.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{CountVocabs, Role, TokenBundle};
use crate::params::{normal, uniform_fan_in, ParamStore};
use crate::tape::{Mat, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of each of the five input channels.
    pub d_c: usize,
    /// Time-encoding width.
    pub d_t: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Tokens per role before the summary token: the query node plus
    /// `max_seq_len - 1` neighbors.
    pub max_seq_len: usize,
    pub use_nfe: bool,
    pub use_rspe: bool,
    pub use_dual_cls: bool,
    /// Rows in the src-within, src-cross, dst-within, dst-cross tables.
    pub vocab_sizes: [usize; 4],
}

impl EncoderConfig {
    pub fn model_dim(&self) -> usize {
        5 * self.d_c
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.d_c, self.d_t, self.d_node, self.d_edge, self.layers, self.heads];
        if dims.contains(&0) {
            return Err(Error::Config("encoder dimensions must all be >= 1".into()));
        }
        if self.model_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim(),
                self.heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        if self.vocab_sizes.contains(&0) {
            return Err(Error::Config("count vocabularies need at least the UNK row".into()));
        }
        Ok(())
    }

    pub fn with_vocabs(mut self, vocabs: &CountVocabs) -> Self {
        self.vocab_sizes = [
            vocabs.src_within.size(),
            vocabs.src_cross.size(),
            vocabs.dst_within.size(),
            vocabs.dst_cross.size(),
        ];
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One sequence per role (pretraining).
    Independent,
    /// Both roles concatenated into one sequence (finetuning).
    Joint,
}

const COUNT_TABLES: [&str; 4] = [
    "count.src_within",
    "count.src_cross",
    "count.dst_within",
    "count.dst_cross",
];

/// Inverse-log-scale frequencies `10^(-9j/(d_t-1))`.
pub fn time_frequencies(d_t: usize) -> Vec<f64> {
    if d_t == 1 {
        return vec![1.0];
    }
    (0..d_t)
        .map(|j| 10f64.powf(-9.0 * j as f64 / (d_t - 1) as f64))
        .collect()
}

/// `cos(w_j * delta_i + b_j)` for every delta and frequency.
pub fn encode_time(deltas: &[f64], w: &[f64], b: &[f64]) -> Mat {
    assert_eq!(w.len(), b.len());
    Array2::from_shape_fn((deltas.len(), w.len()), |(i, j)| (w[j] * deltas[i] + b[j]).cos())
}

/// Encoder weights plus an optional classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (dc, dt, d) = (config.d_c, config.d_t, config.model_dim());
        let mut p = ParamStore::new();
        let linear = |p: &mut ParamStore, rng: &mut dyn rand::RngCore, name: &str, i: usize, o: usize| {
            p.add(format!("{name}.w"), uniform_fan_in(rng, i, i, o));
            p.add(format!("{name}.b"), uniform_fan_in(rng, i, 1, o));
        };

        linear(&mut p, rng, "proj_node", config.d_node, dc);
        linear(&mut p, rng, "proj_edge", config.d_edge, dc);
        p.add("time.w", Array2::from_shape_vec((1, dt), time_frequencies(dt)).unwrap());
        p.add("time.b", Mat::zeros((1, dt)));
        linear(&mut p, rng, "proj_time", dt, dc);
        if config.use_nfe {
            for (name, &rows) in COUNT_TABLES.iter().zip(&config.vocab_sizes) {
                p.add(*name, normal(rng, rows, dc, 1.0));
            }
            linear(&mut p, rng, "proj_within", dc, dc);
            linear(&mut p, rng, "proj_cross", dc, dc);
        } else {
            linear(&mut p, rng, "cooc.l1", 1, dc);
            linear(&mut p, rng, "cooc.l2", dc, 2 * dc);
        }
        if config.use_rspe {
            for name in ["rspe.src_node", "rspe.dst_node", "rspe.src_neighbor", "rspe.dst_neighbor"] {
                p.add(name, normal(rng, 1, d, 0.02));
            }
        }
        if config.use_dual_cls {
            p.add("cls.src", normal(rng, 1, d, 0.02));
            p.add("cls.dst", normal(rng, 1, d, 0.02));
        }
        for l in 0..config.layers {
            let pre = format!("layers.{l}");
            p.add(format!("{pre}.ln1.g"), Mat::ones((1, d)));
            p.add(format!("{pre}.ln1.b"), Mat::zeros((1, d)));
            for w in ["q", "k", "v", "o"] {
                linear(&mut p, rng, &format!("{pre}.attn.{w}"), d, d);
            }
            p.add(format!("{pre}.ln2.g"), Mat::ones((1, d)));
            p.add(format!("{pre}.ln2.b"), Mat::zeros((1, d)));
            linear(&mut p, rng, &format!("{pre}.ffn.l1"), d, 4 * d);
            linear(&mut p, rng, &format!("{pre}.ffn.l2"), 4 * d, d);
        }
        p.add("final_norm.g", Mat::ones((1, d)));
        p.add("final_norm.b", Mat::zeros((1, d)));
        Ok(Self { config, params: p })
    }

    /// Adds (or replaces) a freshly initialized classification head.
    pub fn reset_head(&mut self, num_classes: usize, rng: &mut impl Rng) {
        let d = self.config.model_dim();
        let shapes = [
            ("head.l1", 2 * d, d),
            ("head.l2", d, d),
            ("head.out", d, num_classes),
        ];
        for (name, i, o) in shapes {
            let w = uniform_fan_in(rng, i, i, o);
            let b = uniform_fan_in(rng, i, 1, o);
            for (suffix, value) in [("w", w), ("b", b)] {
                let full = format!("{name}.{suffix}");
                match self.params.id(&full) {
                    Some(id) => *self.params.value_mut(id) = value,
                    None => {
                        self.params.add(full, value);
                    }
                }
            }
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.params
            .id("head.out.w")
            .map(|id| self.params.value(id).ncols())
    }

    /// Copies every backbone tensor present in `other` by name. Head tensors
    /// are left alone.
    pub fn load_backbone_from(&mut self, other: &ParamStore) -> Result<()> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            if name.starts_with("head.") {
                continue;
            }
            let src = other
                .id(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {name}")))?;
            let value = other.value(src);
            if value.dim() != self.params.value(id).dim() {
                return Err(Error::Invalid(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    value.dim(),
                    self.params.value(id).dim()
                )));
            }
            *self.params.value_mut(id) = value.clone();
        }
        Ok(())
    }
}

/// Tape handles produced by one batched forward pass.
pub struct Encoded {
    /// `B × D` source representations.
    pub z_u: Var,
    /// `B × D` destination representations.
    pub z_v: Var,
    /// `2Bk × 2d_c` frequency-channel outputs (within ‖ cross), before the
    /// transformer. Row layout as in [`token_row`].
    pub freq: Var,
    /// Final-norm output for every sequence position.
    pub hidden: Var,
    pub seq_len: usize,
    pub batch: usize,
}

/// Row of token `pos` of `role` for pair `pair` in the fused token matrix.
pub fn token_row(role: Role, pair: usize, pos: usize, batch: usize, k: usize) -> usize {
    let r = match role {
        Role::Source => 0,
        Role::Destination => 1,
    };
    (r * batch + pair) * k + pos
}

fn dropout_mask(rng: &mut impl Rng, shape: (usize, usize), p: f64) -> Mat {
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

struct Ctx<'a, R> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    dropout: Option<(&'a mut R, f64)>,
}

impl<R: Rng> Ctx<'_, R> {
    fn p(&mut self, name: &str) -> Var {
        let id = self.params.expect(name);
        self.tape.param(self.params, id)
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        self.tape.linear(x, w, b)
    }

    fn layer_norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.p(&format!("{name}.g"));
        let b = self.p(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b)
    }

    fn drop(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some((rng, p)) if *p > 0.0 => {
                let mask = dropout_mask(*rng, self.tape.value(x).dim(), *p);
                self.tape.dropout(x, mask)
            }
            _ => x,
        }
    }
}

/// Everything the encoder needs from a batch of bundle pairs, as constants.
struct BatchInputs {
    node: Mat,
    edge: Mat,
    deltas: Mat,
    within_idx: Vec<usize>,
    cross_idx: Vec<usize>,
    within_raw: Mat,
    cross_raw: Mat,
    roles: Vec<Role>,
    is_query: Vec<bool>,
    valid: Vec<bool>,
}

fn collect_inputs(pairs: &[(TokenBundle, TokenBundle)], cfg: &EncoderConfig) -> Result<BatchInputs> {
    let k = cfg.max_seq_len;
    let b = pairs.len();
    let rows = 2 * b * k;
    let mut inp = BatchInputs {
        node: Mat::zeros((rows, cfg.d_node)),
        edge: Mat::zeros((rows, cfg.d_edge)),
        deltas: Mat::zeros((rows, 1)),
        within_idx: vec![0; rows],
        cross_idx: vec![0; rows],
        within_raw: Mat::zeros((rows, 1)),
        cross_raw: Mat::zeros((rows, 1)),
        roles: vec![Role::Source; rows],
        is_query: vec![false; rows],
        valid: vec![false; rows],
    };
    for (p, (sb, db)) in pairs.iter().enumerate() {
        for (role, bundle) in [(Role::Source, sb), (Role::Destination, db)] {
            if bundle.len() != k {
                return Err(Error::Invalid(format!(
                    "bundle has {} tokens, encoder expects {k}",
                    bundle.len()
                )));
            }
            if bundle.node_vecs.ncols() != cfg.d_node || bundle.edge_vecs.ncols() != cfg.d_edge {
                return Err(Error::Invalid("bundle feature widths do not match encoder".into()));
            }
            let t = if role == Role::Source { 0 } else { 1 };
            let sizes = (cfg.vocab_sizes[2 * t], cfg.vocab_sizes[2 * t + 1]);
            for i in 0..k {
                let r = token_row(role, p, i, b, k);
                inp.node.row_mut(r).assign(&bundle.node_vecs.row(i));
                inp.edge.row_mut(r).assign(&bundle.edge_vecs.row(i));
                inp.deltas[[r, 0]] = bundle.time_deltas[i];
                let (wi, ci) = (bundle.within_index[i] as usize, bundle.cross_index[i] as usize);
                if wi >= sizes.0 || ci >= sizes.1 {
                    return Err(Error::Invalid(format!(
                        "count index ({wi}, {ci}) outside vocabulary sizes {sizes:?}"
                    )));
                }
                inp.within_idx[r] = wi;
                inp.cross_idx[r] = ci;
                inp.within_raw[[r, 0]] = bundle.within_raw[i] as f64;
                inp.cross_raw[[r, 0]] = bundle.cross_raw[i] as f64;
                inp.roles[r] = role;
                inp.is_query[r] = i == 0;
                inp.valid[r] = bundle.valid[i];
            }
        }
    }
    Ok(inp)
}

/// Projects and concatenates the five channels: `[rows × 5d_c]`, plus the
/// frequency slice on its own.
fn fuse<R: Rng>(cx: &mut Ctx<'_, R>, cfg: &EncoderConfig, inp: &BatchInputs) -> (Var, Var) {
    let node = cx.tape.constant(inp.node.clone());
    let node = cx.linear(node, "proj_node");
    let edge = cx.tape.constant(inp.edge.clone());
    let edge = cx.linear(edge, "proj_edge");
    let deltas = cx.tape.constant(inp.deltas.clone());
    let t = cx.linear(deltas, "time");
    let t = cx.tape.cos(t);
    let time = cx.linear(t, "proj_time");

    let freq = if cfg.use_nfe {
        let channel = |cx: &mut Ctx<'_, R>, idx: &[usize], tables: [&str; 2], proj: &str| {
            let pick = |want: Role| -> Vec<Option<usize>> {
                idx.iter()
                    .zip(&inp.roles)
                    .map(|(&i, &r)| (r == want).then_some(i))
                    .collect()
            };
            let src_t = cx.p(tables[0]);
            let src = cx.tape.gather(src_t, pick(Role::Source));
            let dst_t = cx.p(tables[1]);
            let dst = cx.tape.gather(dst_t, pick(Role::Destination));
            let e = cx.tape.add(src, dst);
            cx.linear(e, proj)
        };
        let w = channel(cx, &inp.within_idx, [COUNT_TABLES[0], COUNT_TABLES[2]], "proj_within");
        let c = channel(cx, &inp.cross_idx, [COUNT_TABLES[1], COUNT_TABLES[3]], "proj_cross");
        cx.tape.concat_cols(&[w, c])
    } else {
        // Shared per-count MLP summed over both counts: invariant to which
        // sequence is called "source".
        let mlp = |cx: &mut Ctx<'_, R>, counts: &Mat| {
            let c = cx.tape.constant(counts.clone());
            let h = cx.linear(c, "cooc.l1");
            let h = cx.tape.relu(h);
            cx.linear(h, "cooc.l2")
        };
        let a = mlp(cx, &inp.within_raw);
        let b = mlp(cx, &inp.cross_raw);
        cx.tape.add(a, b)
    };
    let fused = cx.tape.concat_cols(&[node, edge, time, freq]);
    (fused, freq)
}

/// Runs the encoder on a batch of `(source, destination)` bundles.
/// `dropout` enables training-mode dropout.
pub fn encode<R: Rng>(
    tape: &mut Tape,
    model: &Model,
    pairs: &[(TokenBundle, TokenBundle)],
    mode: Mode,
    dropout: Option<&mut R>,
) -> Result<Encoded> {
    let cfg = &model.config;
    let b = pairs.len();
    let k = cfg.max_seq_len;
    let inp = collect_inputs(pairs, cfg)?;
    let mut cx = Ctx {
        tape,
        params: &model.params,
        dropout: dropout.map(|r| (r, cfg.dropout)),
    };

    let (mut tokens, freq) = fuse(&mut cx, cfg, &inp);

    if cfg.use_rspe {
        let names = ["rspe.src_node", "rspe.dst_node", "rspe.src_neighbor", "rspe.dst_neighbor"];
        let rows: Vec<Var> = names.iter().map(|n| cx.p(n)).collect();
        let table = cx.tape.concat_rows(&rows);
        let idx = inp
            .roles
            .iter()
            .zip(&inp.is_query)
            .map(|(role, &q)| {
                Some(match (role, q) {
                    (Role::Source, true) => 0,
                    (Role::Destination, true) => 1,
                    (Role::Source, false) => 2,
                    (Role::Destination, false) => 3,
                })
            })
            .collect();
        let pos = cx.tape.gather(table, idx);
        tokens = cx.tape.add(tokens, pos);
    }

    // Sequence layout: index into [tokens; cls.src; cls.dst].
    let n_tok = 2 * b * k;
    let cls = cfg.use_dual_cls;
    let source = if cls {
        let s = cx.p("cls.src");
        let d = cx.p("cls.dst");
        cx.tape.concat_rows(&[tokens, s, d])
    } else {
        tokens
    };
    let role_block = |role: Role, p: usize| -> Vec<usize> {
        let mut v = Vec::with_capacity(k + 1);
        if cls {
            v.push(n_tok + if role == Role::Source { 0 } else { 1 });
        }
        v.extend((0..k).map(|i| token_row(role, p, i, b, k)));
        v
    };
    let mut layout: Vec<usize> = Vec::new();
    let seq_len = match mode {
        Mode::Independent => {
            for role in [Role::Source, Role::Destination] {
                for p in 0..b {
                    layout.extend(role_block(role, p));
                }
            }
            k + cls as usize
        }
        Mode::Joint => {
            for p in 0..b {
                layout.extend(role_block(Role::Source, p));
                layout.extend(role_block(Role::Destination, p));
            }
            2 * (k + cls as usize)
        }
    };
    let key_valid: Vec<bool> = layout
        .iter()
        .map(|&i| i >= n_tok || inp.valid[i])
        .collect();
    let mut h = cx.tape.gather(source, layout.iter().map(|&i| Some(i)).collect());

    let d = cfg.model_dim();
    for l in 0..cfg.layers {
        let pre = format!("layers.{l}");
        let n = cx.layer_norm(h, &format!("{pre}.ln1"));
        let q = cx.linear(n, &format!("{pre}.attn.q"));
        let kk = cx.linear(n, &format!("{pre}.attn.k"));
        let v = cx.linear(n, &format!("{pre}.attn.v"));
        let a = cx.tape.attention(q, kk, v, seq_len, cfg.heads, &key_valid);
        let a = cx.linear(a, &format!("{pre}.attn.o"));
        let a = cx.drop(a);
        h = cx.tape.add(h, a);

        let n = cx.layer_norm(h, &format!("{pre}.ln2"));
        let f = cx.linear(n, &format!("{pre}.ffn.l1"));
        let f = cx.tape.gelu(f);
        let f = cx.drop(f);
        let f = cx.linear(f, &format!("{pre}.ffn.l2"));
        let f = cx.drop(f);
        h = cx.tape.add(h, f);
    }
    let z = cx.layer_norm(h, "final_norm");
    if cx.tape.value(z).iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite encoder output".into()));
    }
    debug_assert_eq!(cx.tape.value(z).ncols(), d);

    let seq_start = |role: Role, p: usize| match mode {
        Mode::Independent => (if role == Role::Source { p } else { b + p }) * seq_len,
        Mode::Joint => p * seq_len + if role == Role::Source { 0 } else { k + cls as usize },
    };
    let (z_u, z_v) = if cls {
        let u = cx.tape.gather(z, (0..b).map(|p| Some(seq_start(Role::Source, p))).collect());
        let v = cx.tape.gather(z, (0..b).map(|p| Some(seq_start(Role::Destination, p))).collect());
        (u, v)
    } else {
        let valid_rows = |start: usize, len: usize| -> Vec<usize> {
            (start..start + len).filter(|&r| key_valid[r]).collect()
        };
        match mode {
            Mode::Independent => {
                let u = cx.tape.segment_mean(z, (0..b).map(|p| valid_rows(seq_start(Role::Source, p), k)).collect());
                let v = cx.tape.segment_mean(z, (0..b).map(|p| valid_rows(seq_start(Role::Destination, p), k)).collect());
                (u, v)
            }
            Mode::Joint => {
                let pooled = cx.tape.segment_mean(z, (0..b).map(|p| valid_rows(p * seq_len, seq_len)).collect());
                (pooled, pooled)
            }
        }
    };

    Ok(Encoded {
        z_u,
        z_v,
        freq,
        hidden: z,
        seq_len,
        batch: b,
    })
}

/// Classification logits from `[z_u ‖ z_v]`.
pub fn classify<R: Rng>(tape: &mut Tape, model: &Model, z_u: Var, z_v: Var, dropout: Option<&mut R>) -> Var {
    let mut cx = Ctx {
        tape,
        params: &model.params,
        dropout: dropout.map(|r| (r, model.config.dropout)),
    };
    let x = cx.tape.concat_cols(&[z_u, z_v]);
    let h = cx.linear(x, "head.l1");
    let h = cx.tape.relu(h);
    let h = cx.drop(h);
    let h = cx.linear(h, "head.l2");
    let h = cx.tape.relu(h);
    let h = cx.drop(h);
    cx.linear(h, "head.out")
}

/// Forward pass without dropout; returns `(z_u, z_v)` as plain matrices.
pub fn embed(model: &Model, pairs: &[(TokenBundle, TokenBundle)], mode: Mode) -> Result<(Mat, Mat)> {
    let mut tape = Tape::new();
    let enc = encode::<rand_chacha::ChaCha8Rng>(&mut tape, model, pairs, mode, None)?;
    Ok((tape.value(enc.z_u).clone(), tape.value(enc.z_v).clone()))
}

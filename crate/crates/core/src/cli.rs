//! Command-line front end. Every command writes into the run directory and
//! leaves a manifest describing what it read and how long it took.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::analysis::{asymmetry, sample_edges, ProbeKind};
use crate::checkpoint::{Checkpoint, CheckpointMeta, Stage};
use crate::config::RunConfig;
use crate::encoder::{Mode, Model};
use crate::error::{Error, Result};
use crate::features::{CountVocabs, FeatureMatrices, EDGE_FEATURES_FILE, NODE_FEATURES_FILE};
use crate::finetune::{evaluate, finetune_loop, labeled_set, mean_std, LabelMeta};
use crate::graph::{ingest_edges, SplitName, TemporalGraph};
use crate::pretrain::{cache_digest, precompute_batches, pretrain_loop, BatchCache};
use crate::rng::{stream_rng, Stream};
use crate::synth::generate;

const FORMATS: &str = "\
File formats:
  edges CSV      header `src,dst,timestamp[,label]`, integer node ids, one event per row
  features dir   node_features.bin and edge_features.bin, each `DGNF | version u32 |
                 rows u64 | cols u64 | f32 LE row-major`
  labels JSON    {\"num_classes\": C, \"class_names\": [...]?}
  batch cache    `DGNB | version u32 | digest [32] | batches u64 | slots u32` then batches
  checkpoint     `DGNC | version u32 | seed u64 | meta JSON | named f32 tensors`

Exit codes: 0 success, 2 configuration or input error, 3 I/O or file format error,
4 numeric failure during training.";

#[derive(Debug, Parser)]
#[command(name = "rolegraph", version, about = "Role-aware transformer for directed temporal graphs", after_long_help = FORMATS)]
pub struct Cli {
    /// Output root for every artifact.
    #[arg(long, global = true, env = "DYG_RUN_DIR", default_value = "run")]
    pub run_dir: PathBuf,
    /// JSON file with configuration keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, e.g. `--set d_c=16`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Run seed; overrides the `seed` configuration key.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    None,
    Nfe,
    Rspe,
    Cls,
    Pretrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CacheSplit {
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSplit {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProbeArg {
    Global,
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Independent,
    Joint,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load an edge CSV and report its size and split boundaries.
    Ingest {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        num_nodes: Option<usize>,
    },
    /// Generate a synthetic graph with planted role-dependent labels.
    GenSynth {
        #[arg(long)]
        nodes: Option<usize>,
        #[arg(long)]
        edges: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        d_node: Option<usize>,
        #[arg(long)]
        d_edge: Option<usize>,
        /// Defaults to `<run-dir>/data`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build the contrastive batch cache for one split, plus the count
    /// vocabulary from the training split.
    Precompute {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, value_enum)]
        split: CacheSplit,
        /// Defaults to `<run-dir>/cache`.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Contrastive pretraining from cached batches.
    Pretrain {
        #[arg(long)]
        edges: PathBuf,
        /// Directory with node_features.bin and edge_features.bin.
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        ablation: Ablation,
    },
    /// Edge classification, optionally starting from a pretrained backbone.
    Finetune {
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Label metadata JSON.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "none")]
        ablation: Ablation,
        /// Comma-separated seeds; defaults to the run seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Score a finetuned checkpoint on the validation or test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Role-asymmetry probe over sampled test edges.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum)]
        kind: ProbeArg,
        #[arg(long)]
        samples: Option<usize>,
        /// Encoding mode; defaults to the checkpoint's downstream mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Also write per-sample scores.
        #[arg(long)]
        dump_scores: bool,
        /// Defaults to `<run-dir>/probe_<kind>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest { .. } => "ingest",
            Command::GenSynth { .. } => "gen-synth",
            Command::Precompute { .. } => "precompute",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Evaluate { .. } => "evaluate",
            Command::Probe { .. } => "probe",
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Invalid(_) | Error::Json(_) | Error::Parse { .. } => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) => 4,
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing input file {}", path.display())))
    }
}

fn feature_files(dir: &Path) -> [PathBuf; 2] {
    [dir.join(NODE_FEATURES_FILE), dir.join(EDGE_FEATURES_FILE)]
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn load_inputs(edges: &Path, features: &Path) -> Result<(TemporalGraph, FeatureMatrices)> {
    let feats = FeatureMatrices::load_dir(features)?;
    let graph = ingest_edges(edges, Some(feats.node.nrows()))?;
    feats.check_against(&graph)?;
    Ok((graph, feats))
}

fn apply_ablation(cfg: &mut RunConfig, ablation: Ablation) {
    match ablation {
        Ablation::Nfe => cfg.use_nfe = false,
        Ablation::Rspe => cfg.use_rspe = false,
        Ablation::Cls => cfg.use_dual_cls = false,
        Ablation::None | Ablation::Pretrain => {}
    }
}

struct Ctx {
    run_dir: PathBuf,
    cfg: RunConfig,
    inputs: Vec<PathBuf>,
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let name = cli.command.name();
    let mut ctx = Ctx {
        run_dir: cli.run_dir.clone(),
        cfg,
        inputs: Vec::new(),
    };
    let outcome = dispatch(&mut ctx, &cli.command)?;
    let mut inputs = serde_json::Map::new();
    for p in &ctx.inputs {
        inputs.insert(p.display().to_string(), json!(file_digest(p)?));
    }
    let manifest = json!({
        "command": name,
        "seed": ctx.cfg.seed,
        "config": ctx.cfg,
        "inputs": inputs,
        "outputs": outcome,
        "wall_time_secs": started.elapsed().as_secs_f64(),
    });
    write_json(&ctx.run_dir.join(format!("manifest-{name}.json")), &manifest)
}

fn dispatch(ctx: &mut Ctx, command: &Command) -> Result<serde_json::Value> {
    match command {
        Command::Ingest { edges, num_nodes } => ingest(ctx, edges, *num_nodes),
        Command::GenSynth {
            nodes,
            edges,
            classes,
            beta,
            d_node,
            d_edge,
            out_dir,
        } => {
            let c = &mut ctx.cfg;
            c.synth_nodes = nodes.unwrap_or(c.synth_nodes);
            c.synth_edges = edges.unwrap_or(c.synth_edges);
            c.synth_classes = classes.unwrap_or(c.synth_classes);
            c.synth_beta = beta.unwrap_or(c.synth_beta);
            c.synth_d_node = d_node.unwrap_or(c.synth_d_node);
            c.synth_d_edge = d_edge.unwrap_or(c.synth_d_edge);
            let synth = c.synth();
            synth.validate()?;
            let out = out_dir.clone().unwrap_or_else(|| ctx.run_dir.join("data"));
            create_dir(&ctx.run_dir)?;
            generate(&synth)?.write_dir(&out)?;
            Ok(json!({ "data_dir": out }))
        }
        Command::Precompute { edges, split, cache_dir } => precompute(ctx, edges, *split, cache_dir.as_deref()),
        Command::Pretrain {
            edges,
            features,
            cache_dir,
            ablation,
        } => pretrain(ctx, edges, features, cache_dir.as_deref(), *ablation),
        Command::Finetune {
            edges,
            features,
            labels,
            from_checkpoint,
            ablation,
            seeds,
        } => finetune(ctx, edges, features, labels, from_checkpoint.as_deref(), *ablation, seeds),
        Command::Evaluate {
            checkpoint,
            edges,
            features,
            labels,
            split,
        } => evaluate_cmd(ctx, checkpoint, edges, features, labels, *split),
        Command::Probe {
            checkpoint,
            edges,
            features,
            kind,
            samples,
            mode,
            dump_scores,
            out,
        } => probe(ctx, checkpoint, edges, features, *kind, *samples, *mode, *dump_scores, out.as_deref()),
    }
}

fn ingest(ctx: &mut Ctx, edges: &Path, num_nodes: Option<usize>) -> Result<serde_json::Value> {
    require_file(edges)?;
    ctx.inputs.push(edges.to_path_buf());
    let graph = ingest_edges(edges, num_nodes)?;
    let splits = graph.chronological_split(ctx.cfg.split())?;
    let summary = json!({
        "num_events": graph.num_events(),
        "num_nodes": graph.num_nodes(),
        "labeled": graph.events().iter().filter(|e| e.label.is_some()).count(),
        "splits": { "train": [splits.train.start, splits.train.end],
                    "val": [splits.val.start, splits.val.end],
                    "test": [splits.test.start, splits.test.end] },
    });
    create_dir(&ctx.run_dir)?;
    let out = ctx.run_dir.join("graph_summary.json");
    write_json(&out, &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(json!({ "summary": out }))
}

const VOCAB_FILE: &str = "vocab.json";

fn cache_file(split: CacheSplit) -> &'static str {
    match split {
        CacheSplit::Train => "train.dgnb",
        CacheSplit::Val => "val.dgnb",
    }
}

fn precompute(ctx: &mut Ctx, edges: &Path, split: CacheSplit, cache_dir: Option<&Path>) -> Result<serde_json::Value> {
    require_file(edges)?;
    ctx.inputs.push(edges.to_path_buf());
    let c = &ctx.cfg;
    if c.max_seq_len < 2 {
        return Err(Error::Config("max_seq_len must be at least 2".into()));
    }
    let graph = ingest_edges(edges, None)?;
    let splits = graph.chronological_split(c.split())?;
    let range = match split {
        CacheSplit::Train => splits.train.clone(),
        CacheSplit::Val => splits.val.clone(),
    };
    let batches = precompute_batches(&graph, range.clone(), c.max_seq_len, c.batch_size)?;
    let vocab = CountVocabs::build(&graph, splits.train.clone(), c.max_seq_len, c.n_min);
    let dir = cache_dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir.join("cache"));
    create_dir(&ctx.run_dir)?;
    create_dir(&dir)?;
    let cache = BatchCache {
        digest: cache_digest(&graph, &range, c.max_seq_len, c.batch_size),
        slots: (c.max_seq_len - 1) as u32,
        batches,
    };
    let path = dir.join(cache_file(split));
    cache.save(&path)?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    log::info!("wrote {} batches to {}", cache.batches.len(), path.display());
    Ok(json!({ "cache": path, "batches": cache.batches.len(), "vocab": dir.join(VOCAB_FILE) }))
}

fn load_cache(path: &Path, graph: &TemporalGraph, range: &std::ops::Range<usize>, cfg: &RunConfig) -> Result<BatchCache> {
    let cache = BatchCache::load(path)?;
    if cache.digest != cache_digest(graph, range, cfg.max_seq_len, cfg.batch_size) {
        return Err(Error::Config(format!(
            "{} was built for different edges or settings; rerun precompute",
            path.display()
        )));
    }
    Ok(cache)
}

fn pretrain(
    ctx: &mut Ctx,
    edges: &Path,
    features: &Path,
    cache_dir: Option<&Path>,
    ablation: Ablation,
) -> Result<serde_json::Value> {
    if ablation == Ablation::Pretrain {
        return Err(Error::Config("the pretrain ablation skips this command entirely".into()));
    }
    apply_ablation(&mut ctx.cfg, ablation);
    let dir = cache_dir.map(Path::to_path_buf).unwrap_or_else(|| ctx.run_dir.join("cache"));
    let [nf, ef] = feature_files(features);
    let inputs = [
        edges.to_path_buf(),
        nf,
        ef,
        dir.join(cache_file(CacheSplit::Train)),
        dir.join(cache_file(CacheSplit::Val)),
        dir.join(VOCAB_FILE),
    ];
    for p in &inputs {
        require_file(p)?;
    }
    ctx.inputs.extend(inputs.iter().cloned());
    let c = ctx.cfg.clone();
    let (graph, feats) = load_inputs(edges, features)?;
    let splits = graph.chronological_split(c.split())?;
    let train = load_cache(&inputs[3], &graph, &splits.train, &c)?;
    let val = load_cache(&inputs[4], &graph, &splits.val, &c)?;
    let vocab = CountVocabs::load(&inputs[5])?;

    let enc = c.encoder(feats.node_dim(), feats.edge_dim()).with_vocabs(&vocab);
    let mut model = Model::new(enc, &mut stream_rng(c.seed, Stream::Init))?;
    let outcome = pretrain_loop(
        &mut model,
        &feats,
        &vocab,
        &train.batches,
        &val.batches,
        &c.pretrain(),
        &mut stream_rng(c.seed, Stream::Dropout),
    )?;

    let out = ctx.run_dir.join("pretrain");
    create_dir(&out)?;
    let ckpt = Checkpoint {
        seed: c.seed,
        meta: CheckpointMeta {
            stage: Stage::Pretrain,
            encoder: model.config.clone(),
            vocab,
            run_config: serde_json::to_value(&c)?,
        },
        params: outcome.best,
    };
    ckpt.save(&out.join("model.ckpt"))?;
    write_jsonl(&out.join("log.jsonl"), &outcome.history)?;
    let summary = json!({
        "best_epoch": outcome.best_epoch,
        "best_val_mrr": outcome.best_val_mrr,
        "epochs_run": outcome.history.len(),
        "ablation": ablation,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(json!({ "checkpoint": out.join("model.ckpt"), "summary": summary }))
}

#[allow(clippy::too_many_arguments)]
fn finetune(
    ctx: &mut Ctx,
    edges: &Path,
    features: &Path,
    labels: &Path,
    from_checkpoint: Option<&Path>,
    ablation: Ablation,
    seeds: &[u64],
) -> Result<serde_json::Value> {
    let [nf, ef] = feature_files(features);
    let mut inputs = vec![edges.to_path_buf(), nf, ef, labels.to_path_buf()];
    match (ablation, from_checkpoint) {
        (Ablation::Pretrain, Some(_)) => {
            return Err(Error::Config("--ablation pretrain trains from scratch; drop --from-checkpoint".into()))
        }
        (Ablation::Pretrain, None) => {}
        (_, Some(p)) => inputs.push(p.to_path_buf()),
        (_, None) => {
            return Err(Error::Config("--from-checkpoint is required unless --ablation pretrain".into()))
        }
    }
    for p in &inputs {
        require_file(p)?;
    }
    ctx.inputs.extend(inputs.iter().cloned());
    apply_ablation(&mut ctx.cfg, ablation);
    let (graph, feats) = load_inputs(edges, features)?;
    let meta = LabelMeta::load(labels)?;
    let pretrained = from_checkpoint.map(Checkpoint::load).transpose()?;
    let c = ctx.cfg.clone();
    let splits = graph.chronological_split(c.split())?;

    let (base_config, vocab) = match &pretrained {
        Some(ck) => {
            let e = &ck.meta.encoder;
            if (e.use_nfe, e.use_rspe, e.use_dual_cls) != (c.use_nfe, c.use_rspe, c.use_dual_cls) {
                return Err(Error::Config(format!(
                    "checkpoint was pretrained with nfe={} rspe={} cls={}, which does not match --ablation {ablation:?}",
                    e.use_nfe, e.use_rspe, e.use_dual_cls
                )));
            }
            if (e.d_node, e.d_edge) != (feats.node_dim(), feats.edge_dim()) {
                return Err(Error::Config("checkpoint feature widths differ from the feature files".into()));
            }
            (e.clone(), ck.meta.vocab.clone())
        }
        None => {
            let vocab = CountVocabs::build(&graph, splits.train.clone(), c.max_seq_len, c.n_min);
            (c.encoder(feats.node_dim(), feats.edge_dim()).with_vocabs(&vocab), vocab)
        }
    };

    let seeds = if seeds.is_empty() { vec![c.seed] } else { seeds.to_vec() };
    let root = ctx.run_dir.join("finetune");
    create_dir(&root)?;
    let mut per_seed = Vec::new();
    for &seed in &seeds {
        let mut model = Model::new(base_config.clone(), &mut stream_rng(seed, Stream::Init))?;
        if let Some(ck) = &pretrained {
            model.load_backbone_from(&ck.params)?;
        }
        model.reset_head(meta.num_classes, &mut stream_rng(seed, Stream::HeadInit));
        let outcome = finetune_loop(
            &mut model,
            &graph,
            &feats,
            &vocab,
            &splits,
            meta.num_classes,
            &c.finetune(),
            &mut stream_rng(seed, Stream::Dropout),
        )?;
        let dir = root.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        let mut echo = serde_json::to_value(&c)?;
        echo["seed"] = json!(seed);
        Checkpoint {
            seed,
            meta: CheckpointMeta {
                stage: Stage::Finetune,
                encoder: model.config.clone(),
                vocab: vocab.clone(),
                run_config: echo,
            },
            params: outcome.best,
        }
        .save(&dir.join("model.ckpt"))?;
        write_jsonl(&dir.join("metrics.jsonl"), &outcome.history)?;
        let summary = json!({
            "seed": seed,
            "ablation": ablation,
            "best_epoch": outcome.best_epoch,
            "best_val_macro_f1": outcome.best_val_macro_f1,
            "train_events": [outcome.train_range.start, outcome.train_range.end],
            "val_events": [outcome.val_range.start, outcome.val_range.end],
            "test": outcome.test,
        });
        write_json(&dir.join("summary.json"), &summary)?;
        per_seed.push(summary);
    }
    let macro_scores: Vec<f64> = per_seed.iter().map(|s| s["test"]["macro_f1"].as_f64().unwrap()).collect();
    let weighted: Vec<f64> = per_seed.iter().map(|s| s["test"]["weighted_f1"].as_f64().unwrap()).collect();
    let (mm, ms) = mean_std(&macro_scores);
    let (wm, ws) = mean_std(&weighted);
    let summary = json!({
        "ablation": ablation,
        "seeds": seeds,
        "test_macro_f1": { "mean": mm, "std": ms },
        "test_weighted_f1": { "mean": wm, "std": ws },
        "per_seed": per_seed,
    });
    write_json(&root.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary["test_macro_f1"])?);
    Ok(json!({ "summary": root.join("summary.json") }))
}

fn evaluate_cmd(
    ctx: &mut Ctx,
    checkpoint: &Path,
    edges: &Path,
    features: &Path,
    labels: &Path,
    split: EvalSplit,
) -> Result<serde_json::Value> {
    let [nf, ef] = feature_files(features);
    let inputs = [checkpoint.to_path_buf(), edges.to_path_buf(), nf, ef, labels.to_path_buf()];
    for p in &inputs {
        require_file(p)?;
    }
    ctx.inputs.extend(inputs.iter().cloned());
    let ck = Checkpoint::load(checkpoint)?;
    let meta = LabelMeta::load(labels)?;
    let model = ck.model();
    if model.num_classes() != Some(meta.num_classes) {
        return Err(Error::Config("checkpoint has no classification head for these labels".into()));
    }
    let (graph, feats) = load_inputs(edges, features)?;
    let splits = graph.chronological_split(ctx.cfg.split())?;
    let (name, range) = match split {
        EvalSplit::Val => (SplitName::Val, splits.val.clone()),
        EvalSplit::Test => (SplitName::Test, splits.test.clone()),
    };
    let set = labeled_set(&graph, &feats, &ck.meta.vocab, range, model.config.max_seq_len, meta.num_classes)?;
    let eval = evaluate(&model, &set, ctx.cfg.batch_size, meta.num_classes)?;
    create_dir(&ctx.run_dir)?;
    let out = ctx.run_dir.join(format!("evaluate_{}.json", serde_json::to_value(name)?.as_str().unwrap()));
    write_json(&out, &eval)?;
    println!("{}", serde_json::to_string_pretty(&eval)?);
    Ok(json!({ "metrics": out }))
}

#[allow(clippy::too_many_arguments)]
fn probe(
    ctx: &mut Ctx,
    checkpoint: &Path,
    edges: &Path,
    features: &Path,
    kind: ProbeArg,
    samples: Option<usize>,
    mode: Option<ModeArg>,
    dump_scores: bool,
    out: Option<&Path>,
) -> Result<serde_json::Value> {
    let [nf, ef] = feature_files(features);
    let inputs = [checkpoint.to_path_buf(), edges.to_path_buf(), nf, ef];
    for p in &inputs {
        require_file(p)?;
    }
    ctx.inputs.extend(inputs.iter().cloned());
    let ck = Checkpoint::load(checkpoint)?;
    let model = ck.model();
    let (graph, feats) = load_inputs(edges, features)?;
    let splits = graph.chronological_split(ctx.cfg.split())?;
    let n = samples.unwrap_or(ctx.cfg.probe_samples);
    let chosen = sample_edges(&graph.events()[splits.test.clone()], n, ctx.cfg.seed);
    let (kind, label) = match kind {
        ProbeArg::Global => (ProbeKind::Global, "global"),
        ProbeArg::Structural => (ProbeKind::Structural, "structural"),
    };
    let mode = match (mode, ck.meta.stage) {
        (Some(ModeArg::Independent), _) => Mode::Independent,
        (Some(ModeArg::Joint), _) => Mode::Joint,
        (None, Stage::Finetune) => Mode::Joint,
        (None, _) => Mode::Independent,
    };
    let report = asymmetry(&model, &graph, &feats, &ck.meta.vocab, &chosen, kind, mode, dump_scores)?;
    create_dir(&ctx.run_dir)?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ctx.run_dir.join(format!("probe_{label}.json")));
    write_json(&path, &report)?;
    println!("{label} asymmetry: {:.6} over {} samples", report.mean_score, report.num_samples);
    Ok(json!({ "report": path }))
}

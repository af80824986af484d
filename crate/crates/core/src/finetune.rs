//! Future-edge classification on top of the joint-mode encoder.

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{classify, encode, Mode, Model};
use crate::error::{Error, Result};
use crate::features::{assemble_bundles, CountVocabs, FeatureMatrices, TokenBundle};
use crate::graph::{SplitName, SplitRanges, TemporalGraph};
use crate::params::{AdamW, AdamWConfig, ParamStore};
use crate::schedule::EarlyStopping;
use crate::tape::{Mat, Tape};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMeta {
    pub num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_names: Option<Vec<String>>,
}

impl LabelMeta {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let meta: Self = serde_json::from_str(&s)?;
        if meta.num_classes < 2 {
            return Err(Error::format(path, "num_classes must be at least 2"));
        }
        if meta.class_names.as_ref().is_some_and(|n| n.len() != meta.num_classes) {
            return Err(Error::format(path, "class_names length differs from num_classes"));
        }
        Ok(meta)
    }
}

/// The last `min(budget, len)` indices of `range`.
pub fn select_recent(range: Range<usize>, budget: usize) -> Range<usize> {
    range.end - budget.min(range.len())..range.end
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1 {
    pub macro_f1: f64,
    pub weighted_f1: f64,
}

/// Per-class F1 is 0 when precision + recall is 0. Macro averages over all
/// `num_classes`; weighted averages over classes present in `labels`.
pub fn f1_scores(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<F1> {
    if predictions.len() != labels.len() {
        return Err(Error::Invalid("predictions and labels differ in length".into()));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("cannot score an empty label set".into()));
    }
    let mut tp = vec![0usize; num_classes];
    let mut pred_n = vec![0usize; num_classes];
    let mut support = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::Invalid(format!("class index outside 0..{num_classes}")));
        }
        pred_n[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let per_class: Vec<f64> = (0..num_classes)
        .map(|c| {
            let precision = if pred_n[c] > 0 { tp[c] as f64 / pred_n[c] as f64 } else { 0.0 };
            let recall = if support[c] > 0 { tp[c] as f64 / support[c] as f64 } else { 0.0 };
            if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            }
        })
        .collect();
    let macro_f1 = per_class.iter().sum::<f64>() / num_classes as f64;
    let weighted_f1 = per_class
        .iter()
        .zip(&support)
        .map(|(f, &s)| f * s as f64)
        .sum::<f64>()
        / labels.len() as f64;
    Ok(F1 { macro_f1, weighted_f1 })
}

/// Macro-F1 of always predicting the most frequent label.
pub fn majority_macro_f1(labels: &[usize], num_classes: usize) -> Result<f64> {
    let mut support = vec![0usize; num_classes];
    for &y in labels {
        *support
            .get_mut(y)
            .ok_or_else(|| Error::Invalid(format!("label {y} outside 0..{num_classes}")))? += 1;
    }
    let top = support.iter().copied().max().unwrap_or(0);
    let majority = support.iter().position(|&s| s == top).unwrap_or(0);
    f1_scores(&vec![majority; labels.len()], labels, num_classes).map(|f| f.macro_f1)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub struct LabeledSet {
    pub pairs: Vec<(TokenBundle, TokenBundle)>,
    pub labels: Vec<usize>,
}

/// Bundles and labels for every event in `range`.
pub fn labeled_set(
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    range: Range<usize>,
    k: usize,
    num_classes: usize,
) -> Result<LabeledSet> {
    let mut pairs = Vec::with_capacity(range.len());
    let mut labels = Vec::with_capacity(range.len());
    for e in &graph.events()[range] {
        let label = e
            .label
            .ok_or_else(|| Error::Invalid(format!("edge {} has no label", e.edge_id)))? as usize;
        if label >= num_classes {
            return Err(Error::Invalid(format!(
                "edge {} has label {label} but only {num_classes} classes",
                e.edge_id
            )));
        }
        let s = graph.sample_recent_neighbors(e.src, e.timestamp, k);
        let d = graph.sample_recent_neighbors(e.dst, e.timestamp, k);
        pairs.push(assemble_bundles(feats, &s, &d, vocabs, (e.src, e.dst, e.timestamp))?);
        labels.push(label);
    }
    Ok(LabeledSet { pairs, labels })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub train_budget: usize,
    pub val_budget: usize,
    pub grace_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: SplitName,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub loss: f64,
    pub num_events: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: ParamStore,
    pub best_epoch: usize,
    pub best_val_macro_f1: f64,
    pub history: Vec<EpochRecord>,
    pub test: Evaluation,
    /// Event ranges actually used for training and validation.
    pub train_range: Range<usize>,
    pub val_range: Range<usize>,
}

fn argmax(row: ndarray::ArrayView1<'_, f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Dropout-free predictions and mean cross-entropy over `set`.
pub fn evaluate(model: &Model, set: &LabeledSet, batch_size: usize, num_classes: usize) -> Result<Evaluation> {
    let mut preds = Vec::with_capacity(set.labels.len());
    let mut loss_sum = 0.0;
    for (pairs, labels) in set.pairs.chunks(batch_size).zip(set.labels.chunks(batch_size)) {
        let mut tape = Tape::new();
        let enc = encode::<rand_chacha::ChaCha8Rng>(&mut tape, model, pairs, Mode::Joint, None)?;
        let logits = classify::<rand_chacha::ChaCha8Rng>(&mut tape, model, enc.z_u, enc.z_v, None);
        let loss = tape.cross_entropy(logits, labels, None)?;
        loss_sum += tape.scalar(loss) * labels.len() as f64;
        preds.extend(tape.value(logits).rows().into_iter().map(argmax));
    }
    let f1 = f1_scores(&preds, &set.labels, num_classes)?;
    Ok(Evaluation {
        macro_f1: f1.macro_f1,
        weighted_f1: f1.weighted_f1,
        loss: loss_sum / set.labels.len() as f64,
        num_events: set.labels.len(),
    })
}

/// Dropout-free class predictions.
pub fn predict(model: &Model, pairs: &[(TokenBundle, TokenBundle)], batch_size: usize) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(batch_size) {
        let mut tape = Tape::new();
        let enc = encode::<rand_chacha::ChaCha8Rng>(&mut tape, model, chunk, Mode::Joint, None)?;
        let logits = classify::<rand_chacha::ChaCha8Rng>(&mut tape, model, enc.z_u, enc.z_v, None);
        preds.extend(tape.value(logits).rows().into_iter().map(argmax));
    }
    Ok(preds)
}

/// Trains `model` (which must already carry a head) on the most recent
/// labeled training events, early-stops on validation macro-F1, and scores
/// the best parameters on the whole test split.
#[allow(clippy::too_many_arguments)]
pub fn finetune_loop<R: Rng>(
    model: &mut Model,
    graph: &TemporalGraph,
    feats: &FeatureMatrices,
    vocabs: &CountVocabs,
    splits: &SplitRanges,
    num_classes: usize,
    cfg: &FinetuneConfig,
    dropout_rng: &mut R,
) -> Result<FinetuneOutcome> {
    if model.num_classes() != Some(num_classes) {
        return Err(Error::Invalid("model head does not match the class count".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let k = model.config.max_seq_len;
    let train_range = select_recent(splits.train.clone(), cfg.train_budget);
    let val_range = select_recent(splits.val.clone(), cfg.val_budget);
    if train_range.is_empty() || val_range.is_empty() {
        return Err(Error::Invalid("training and validation subsets must be non-empty".into()));
    }
    let train = labeled_set(graph, feats, vocabs, train_range.clone(), k, num_classes)?;
    let val = labeled_set(graph, feats, vocabs, val_range.clone(), k, num_classes)?;

    let mut opt = AdamW::new(AdamWConfig::new(cfg.lr, cfg.weight_decay));
    let mut stopper = EarlyStopping::new(cfg.grace_epochs, cfg.patience);
    let mut best = model.params.clone();
    let mut history = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(train.labels.len());
        for (step, (pairs, labels)) in train
            .pairs
            .chunks(cfg.batch_size)
            .zip(train.labels.chunks(cfg.batch_size))
            .enumerate()
        {
            let mut tape = Tape::new();
            let enc = encode(&mut tape, model, pairs, Mode::Joint, Some(&mut *dropout_rng))?;
            let logits = classify(&mut tape, model, enc.z_u, enc.z_v, Some(&mut *dropout_rng));
            let loss = tape
                .cross_entropy(logits, labels, None)
                .map_err(|e| Error::Numeric(format!("epoch {epoch} step {step}: {e}")))?;
            loss_sum += tape.scalar(loss) * labels.len() as f64;
            preds.extend(tape.value(logits).rows().into_iter().map(argmax));
            let grads = tape.backward(loss);
            opt.update(&mut model.params, &tape.param_grads(&grads));
        }
        if !model.params.all_finite() {
            return Err(Error::Numeric(format!("epoch {epoch}: parameters became non-finite")));
        }
        let tf = f1_scores(&preds, &train.labels, num_classes)?;
        history.push(EpochRecord {
            epoch,
            split: SplitName::Train,
            macro_f1: tf.macro_f1,
            weighted_f1: tf.weighted_f1,
            loss: loss_sum / train.labels.len() as f64,
        });
        let v = evaluate(model, &val, cfg.batch_size, num_classes)?;
        history.push(EpochRecord {
            epoch,
            split: SplitName::Val,
            macro_f1: v.macro_f1,
            weighted_f1: v.weighted_f1,
            loss: v.loss,
        });
        log::info!(
            "finetune epoch {epoch}: train loss {:.4} val macro-F1 {:.4}",
            loss_sum / train.labels.len() as f64,
            v.macro_f1
        );
        let verdict = stopper.observe(v.macro_f1);
        if verdict.improved {
            best = model.params.clone();
        }
        if verdict.stop {
            break;
        }
    }
    model.params = best.clone();
    let test_set = labeled_set(graph, feats, vocabs, splits.test.clone(), k, num_classes)?;
    let test = evaluate(model, &test_set, cfg.batch_size, num_classes)?;
    Ok(FinetuneOutcome {
        best,
        best_epoch: stopper.best_epoch(),
        best_val_macro_f1: stopper.best().unwrap_or(0.0),
        history,
        test,
        train_range,
        val_range,
    })
}

/// Logits as a plain matrix, for probing and tests.
pub fn logits(model: &Model, pairs: &[(TokenBundle, TokenBundle)]) -> Result<Mat> {
    let mut tape = Tape::new();
    let enc = encode::<rand_chacha::ChaCha8Rng>(&mut tape, model, pairs, Mode::Joint, None)?;
    let l = classify::<rand_chacha::ChaCha8Rng>(&mut tape, model, enc.z_u, enc.z_v, None);
    Ok(tape.value(l).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skewed_three_class_example() {
        let labels = [0, 0, 0, 0, 0, 0, 0, 0, 1, 2];
        let f = f1_scores(&[0; 10], &labels, 3).unwrap();
        assert!((f.macro_f1 - 0.2963).abs() < 1e-4);
        assert!((f.weighted_f1 - 0.7111).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty() {
        let f = f1_scores(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((f.macro_f1, f.weighted_f1), (1.0, 1.0));
        assert!(f1_scores(&[], &[], 3).is_err());
    }

    #[test]
    fn recent_selection_clips_and_abuts() {
        assert_eq!(select_recent(0..7, 10_000), 0..7);
        assert_eq!(select_recent(0..20_000, 10_000), 10_000..20_000);
        assert_eq!(select_recent(5..9, 2).end, 9);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}

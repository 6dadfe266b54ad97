//! Fine-tuning heads and evaluation: per-region entity classification and
//! whole-document classification.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::seq::index::sample;

use crate::autograd::{Graph, NodeId};
use crate::checkpoint::{load_params, Checkpoint};
use crate::config::RunConfig;
use crate::corpus::{Corpus, RegionType};
use crate::encoder::region_slots;
use crate::error::{Error, Result};
use crate::model::{prepare_docs, DocInput, UdocModel};
use crate::params::{Initializer, Linear, ParamId};
use crate::quantizer::QUANTIZER_PREFIX;
use crate::seeding;
use crate::tensor::Tensor;
use crate::trainer::{adam_step, clip_gradients, AdamState};

pub const NUM_CLASSES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Entity,
    Doc,
}

impl std::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "entity" => Ok(Task::Entity),
            "doc" => Ok(Task::Doc),
            other => Err(format!("unknown task {other:?}, expected entity or doc")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Entity => "entity",
            Task::Doc => "doc",
        })
    }
}

/// Linear classifier over `[H_V ; H_S]` of each REGION slot (`2d → 4`).
#[derive(Clone, Copy, Debug)]
pub struct EntityHead {
    pub linear: Linear,
}

/// Linear classifier over `mean(H_V) ⊙ mean(H_S)` of the REGION slots (`d → 4`).
#[derive(Clone, Copy, Debug)]
pub struct DocHead {
    pub linear: Linear,
}

/// A model with a task head attached to its parameter store.
#[derive(Clone, Debug)]
pub struct FinetuneModel {
    pub model: UdocModel,
    pub task: Task,
    pub head: Linear,
}

impl FinetuneModel {
    pub fn new(mut model: UdocModel, task: Task, seed: u64) -> Self {
        let d = model.encoder.d_model;
        let mut init = Initializer::new(seeding::stream(seed, seeding::TAG_INIT, 1));
        let head = match task {
            Task::Entity => init.add_linear(&mut model.store, "finetune.entity", 2 * d, NUM_CLASSES),
            Task::Doc => init.add_linear(&mut model.store, "finetune.doc", d, NUM_CLASSES),
        };
        Self { model, task, head }
    }

    /// Snapshot of every parameter, tagged with the task.
    pub fn checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            kind: format!("finetune-{}", self.task),
            config: cfg.clone(),
            training: None,
            tensors: self
                .model
                .store
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        let task: Task = ckpt
            .kind
            .strip_prefix("finetune-")
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::InvalidInput(format!("{} is not a fine-tuned model", origin.display())))?;
        let model = UdocModel::new(&ckpt.config, ckpt.config.train.seed);
        let mut m = Self::new(model, task, ckpt.config.finetune.seed);
        load_params(&mut m.model.store, ckpt, origin)?;
        Ok(m)
    }

    /// Everything that reaches the task logits: backbone, embeddings,
    /// blocks and the task head.
    pub fn trainable(&self) -> Vec<ParamId> {
        self.model
            .store
            .iter()
            .filter(|(_, n, _)| !n.starts_with(QUANTIZER_PREFIX) && !n.starts_with("head."))
            .map(|(id, _, _)| id)
            .collect()
    }

    /// `[N, 2d]` entity features of one page.
    pub fn entity_features(&self, g: &mut Graph, doc: &DocInput) -> Result<NodeId> {
        let (seq, out) = self.model.encode_doc(g, doc)?;
        let regions = region_slots(&seq.kinds);
        let hv = g.gather_rows(out.h_visual, &regions);
        let ht = g.gather_rows(out.h_textual, &regions);
        Ok(g.concat_cols(&[hv, ht]))
    }

    /// `[1, d]` pooled document feature: product of region-averaged streams.
    pub fn doc_features(&self, g: &mut Graph, doc: &DocInput) -> Result<NodeId> {
        let (seq, out) = self.model.encode_doc(g, doc)?;
        let regions = region_slots(&seq.kinds);
        let hv = g.gather_rows(out.h_visual, &regions);
        let ht = g.gather_rows(out.h_textual, &regions);
        let pv = g.mean_rows(hv);
        let pt = g.mean_rows(ht);
        Ok(g.mul(pv, pt))
    }

    /// `[rows, 4]` logits of one page: one row per region or a single row.
    pub fn logits(&self, g: &mut Graph, doc: &DocInput) -> Result<NodeId> {
        let f = match self.task {
            Task::Entity => self.entity_features(g, doc)?,
            Task::Doc => self.doc_features(g, doc)?,
        };
        Ok(self.head.forward(g, &self.model.store, f))
    }

    pub fn predict(&self, doc: &DocInput) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let l = self.logits(&mut g, doc)?;
        let lv = g.value(l);
        Ok((0..lv.rows()).map(|r| argmax(lv.row_slice(r))).collect())
    }
}

fn argmax(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |b, i| if xs[i] > xs[b] { i } else { b })
}

/// Ground-truth labels of one document for `task`.
pub fn labels(doc: &crate::corpus::DocumentRecord, task: Task) -> Vec<usize> {
    match task {
        Task::Entity => doc.regions.iter().map(|r| r.type_label.index()).collect(),
        Task::Doc => vec![doc.doc_class().index()],
    }
}

/// Deterministic train/test split of document indices.
pub fn split(count: usize, train_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut seeding::stream(seed, seeding::TAG_SPLIT, 0));
    let n_train = ((count as f64 * train_frac).round() as usize).clamp(1.min(count), count);
    let test = idx.split_off(n_train);
    let mut train = idx;
    train.sort_unstable();
    let mut test = test;
    test.sort_unstable();
    (train, test)
}

/// Per-class precision/recall/F1, micro F1 and accuracy.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<usize>,
    pub micro_f1: f64,
    pub accuracy: f64,
    pub count: usize,
}

impl EvalReport {
    pub fn from_predictions(task: Task, preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let micro_f1 = f1_micro(preds, labels, classes)?;
        let mut tp = vec![0usize; classes];
        let mut fp = vec![0usize; classes];
        let mut fn_ = vec![0usize; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p == l {
                tp[p] += 1;
            } else {
                fp[p] += 1;
                fn_[l] += 1;
            }
        }
        let ratio = |a: usize, b: usize| if a + b == 0 { 0.0 } else { a as f64 / (a + b) as f64 };
        let precision: Vec<f64> = (0..classes).map(|c| ratio(tp[c], fp[c])).collect();
        let recall: Vec<f64> = (0..classes).map(|c| ratio(tp[c], fn_[c])).collect();
        let f1 = (0..classes)
            .map(|c| {
                let (p, r) = (precision[c], recall[c]);
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            })
            .collect();
        let correct = tp.iter().sum::<usize>();
        Ok(Self {
            task,
            precision,
            recall,
            f1,
            support: (0..classes).map(|c| tp[c] + fn_[c]).collect(),
            micro_f1,
            accuracy: correct as f64 / preds.len() as f64,
            count: preds.len(),
        })
    }

    /// Flat `key = value` text.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "task = {}", self.task);
        let _ = writeln!(s, "count = {}", self.count);
        for c in 0..self.f1.len() {
            let name = RegionType::from_index(c).map_or_else(|| c.to_string(), |t| t.to_string());
            let _ = writeln!(s, "{name}.precision = {:.6}", self.precision[c]);
            let _ = writeln!(s, "{name}.recall = {:.6}", self.recall[c]);
            let _ = writeln!(s, "{name}.f1 = {:.6}", self.f1[c]);
            let _ = writeln!(s, "{name}.support = {}", self.support[c]);
        }
        let _ = writeln!(s, "micro_f1 = {:.6}", self.micro_f1);
        let _ = writeln!(s, "accuracy = {:.6}", self.accuracy);
        s
    }
}

/// Micro-averaged F1 over `classes` classes.
pub fn f1_micro(preds: &[usize], labels: &[usize], classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("F1 of an empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = preds.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(Error::InvalidInput(format!("class {bad} outside 0..{classes}")));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for c in 0..classes {
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == c, l == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    let denom = 2 * tp + fp + fn_;
    Ok(if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// A fine-tuning run and its held-out evaluation.
#[derive(Clone, Debug)]
pub struct FinetuneResult {
    pub model: FinetuneModel,
    pub losses: Vec<f64>,
    pub report: EvalReport,
    pub test_docs: Vec<usize>,
}

/// Fine-tunes `model` on the training split of `corpus` and evaluates on the rest.
pub fn finetune(model: UdocModel, corpus: &Corpus, task: Task, cfg: &RunConfig) -> Result<FinetuneResult> {
    let ft = &cfg.finetune;
    let mut m = FinetuneModel::new(model, task, ft.seed);
    let text_checksum = m.model.text.checksum();
    let docs = prepare_docs(&corpus.docs, &m.model.text)?;
    let all_labels: Vec<Vec<usize>> = corpus.docs.iter().map(|d| labels(d, task)).collect();
    let (train, test) = split(docs.len(), ft.train_frac, ft.seed);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("fine-tuning needs non-empty train and test splits".into()));
    }
    let trainable = m.trainable();
    let mut adam = AdamState::new(&m.model.store);
    let mut losses = Vec::with_capacity(ft.steps);
    for step in 0..ft.steps {
        let mut rng = seeding::stream(ft.seed, seeding::TAG_FINETUNE_STEP, step as u64);
        let k = ft.batch_size.min(train.len());
        let mut picked: Vec<usize> = sample(&mut rng, train.len(), k).into_iter().map(|i| train[i]).collect();
        picked.sort_unstable();
        let mut g = Graph::new();
        let mut ce = Vec::with_capacity(k);
        let mut count = 0;
        for &d in &picked {
            let logits = m.logits(&mut g, &docs[d])?;
            ce.push(g.cross_entropy_sum(logits, &all_labels[d]));
            count += all_labels[d].len();
        }
        let mut total = ce[0];
        for &c in &ce[1..] {
            total = g.add(total, c);
        }
        let loss = g.scale(total, 1.0 / count as f64);
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("fine-tuning loss at step {step}")));
        }
        losses.push(value);
        let mut grads = g.backward(loss);
        clip_gradients(&mut grads, cfg.train.clip_norm);
        adam_step(&mut m.model.store, &grads, &mut adam, &trainable, ft.lr, ft.weight_decay)?;
    }
    debug_assert_eq!(text_checksum, m.model.text.checksum());
    let report = evaluate(&m, &docs, &all_labels, &test)?;
    Ok(FinetuneResult {
        model: m,
        losses,
        report,
        test_docs: test,
    })
}

/// Evaluates `m` on the documents `indices`.
pub fn evaluate(m: &FinetuneModel, docs: &[DocInput], labels: &[Vec<usize>], indices: &[usize]) -> Result<EvalReport> {
    let mut preds = Vec::new();
    let mut gold = Vec::new();
    for &d in indices {
        preds.extend(m.predict(&docs[d])?);
        gold.extend_from_slice(&labels[d]);
    }
    EvalReport::from_predictions(m.task, &preds, &gold, NUM_CLASSES)
}

/// Trains a bare linear classifier on fixed features; used to sanity-check
/// the head and optimizer on separable data.
pub fn fit_linear(features: &Tensor, labels: &[usize], classes: usize, steps: usize, lr: f64, seed: u64) -> Result<Vec<usize>> {
    let mut store = crate::params::ParamStore::new();
    let mut init = Initializer::new(seeding::stream(seed, seeding::TAG_INIT, 2));
    let head = init.add_linear(&mut store, "probe", features.cols(), classes);
    let ids: Vec<ParamId> = store.ids().collect();
    let mut adam = AdamState::new(&store);
    for _ in 0..steps {
        let mut g = Graph::new();
        let x = g.constant(features.clone());
        let l = head.forward(&mut g, &store, x);
        let ce = g.cross_entropy_sum(l, labels);
        let loss = g.scale(ce, 1.0 / labels.len() as f64);
        let grads = g.backward(loss);
        adam_step(&mut store, &grads, &mut adam, &ids, lr, 0.0)?;
    }
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let l = head.forward(&mut g, &store, x);
    let lv = g.value(l);
    Ok((0..lv.rows()).map(|r| argmax(lv.row_slice(r))).collect())
}

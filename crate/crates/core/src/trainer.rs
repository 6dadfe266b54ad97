//! Pretraining loop: Adam with decoupled weight decay, linear warmup,
//! gradient clipping, metrics and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autograd::{Gradients, Graph};
use crate::checkpoint::{copy_dir, load_params, step_dir, Checkpoint, TrainingMeta};
use crate::config::{RunConfig, TrainConfig};
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::losses::LossReport;
use crate::model::{prepare_docs, pretrain_forward, sample_batch, DocInput, UdocModel};
use crate::params::{ParamId, ParamStore};
use crate::quantizer::{Relaxation, TemperatureSchedule};
use crate::seeding;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.resolved";
pub const BEST_DIR: &str = "best.ckpt";
pub const LAST_DIR: &str = "last.ckpt";
/// Trailing window of the smoothed total loss.
pub const SMOOTHING_WINDOW: usize = 10;

/// Learning rate at `step`: linear ramp from 0 over the warmup, then constant.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_frac * cfg.total_steps as f64;
    let s = step as f64;
    if warmup <= 0.0 || s >= warmup {
        cfg.lr
    } else {
        cfg.lr * s / warmup
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments, one pair per parameter tensor in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update of the `trainable` tensors. Missing gradients count as zero.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    trainable: &[ParamId],
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for &id in trainable {
        if let Some(g) = grads.get(id) {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
    }
    state.step += 1;
    let t = i32::try_from(state.step).unwrap_or(i32::MAX);
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for &id in trainable {
        let i = id.index();
        let grad = grads.get(id);
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let p = store.get_mut(id);
        for k in 0..p.len() {
            let gk = grad.map_or(0.0, |g| g.data()[k]);
            let mk = ADAM_BETA1 * m.data()[k] + (1.0 - ADAM_BETA1) * gk;
            let vk = ADAM_BETA2 * v.data()[k] + (1.0 - ADAM_BETA2) * gk * gk;
            m.data_mut()[k] = mk;
            v.data_mut()[k] = vk;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            let x = &mut p.data_mut()[k];
            *x = *x * decay - lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` to global norm `max_norm` if larger; returns the norm before.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub report: LossReport,
    pub perplexity: Vec<f64>,
}

impl StepRecord {
    pub fn header(codebooks: usize) -> String {
        let mut cols = vec!["step", "lr", "tau", "msm", "vcl", "vla", "mvm", "total"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        cols.extend((0..codebooks).map(|c| format!("perplexity_{c}")));
        cols.join("\t")
    }

    /// Tab-separated values; floats are written so that they parse back exactly.
    pub fn tsv(&self) -> String {
        let r = &self.report;
        let mut cols = vec![
            self.step.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.tau),
            format!("{:?}", r.msm),
            format!("{:?}", r.vcl),
            format!("{:?}", r.vla),
            r.mvm.map_or_else(|| "-".to_string(), |v| format!("{v:?}")),
            format!("{:?}", r.total),
        ];
        cols.extend(self.perplexity.iter().map(|p| format!("{p:?}")));
        cols.join("\t")
    }
}

/// Mean of the trailing `SMOOTHING_WINDOW` totals ending at each step.
pub fn smoothed(totals: &[f64]) -> Vec<f64> {
    (0..totals.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(SMOOTHING_WINDOW);
            let w = &totals[lo..=i];
            w.iter().sum::<f64>() / w.len() as f64
        })
        .collect()
}

/// Pretraining state machine.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: UdocModel,
    pub docs: Vec<DocInput>,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
    pub best: Option<(f64, usize)>,
    recent: Vec<f64>,
    trainable: Vec<ParamId>,
    frozen: Vec<ParamId>,
    schedule: TemperatureSchedule,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, corpus: &Corpus) -> Result<Self> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidInput("cannot pretrain on an empty corpus".into()));
        }
        let model = UdocModel::new(cfg, cfg.train.seed);
        let docs = prepare_docs(&corpus.docs, &model.text)?;
        let adam = AdamState::new(&model.store);
        let trainable = model.trainable(&cfg.loss.tasks);
        let frozen = model.frozen(&cfg.loss.tasks);
        Ok(Self {
            cfg: cfg.clone(),
            model,
            docs,
            adam,
            step: 0,
            best: None,
            recent: Vec::new(),
            trainable,
            frozen,
            schedule: TemperatureSchedule::from_config(&cfg.train),
        })
    }

    /// Restores parameters, optimizer moments and counters from a checkpoint.
    pub fn resume(corpus: &Corpus, dir: &Path) -> Result<Self> {
        let ckpt = Checkpoint::load(dir)?;
        let meta = ckpt
            .training
            .clone()
            .ok_or_else(|| Error::format(dir, "checkpoint has no training state"))?;
        let mut t = Self::new(&ckpt.config, corpus)?;
        load_params(&mut t.model.store, &ckpt, dir)?;
        let names: Vec<String> = t.model.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            for (prefix, target) in [("opt.m.", &mut t.adam.m), ("opt.v.", &mut t.adam.v)] {
                let key = format!("{prefix}{name}");
                let value = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::format(dir, format!("missing tensor {key}")))?;
                target[i] = value.clone();
            }
        }
        t.adam.step = meta.step as u64;
        t.step = meta.step;
        t.best = meta.best;
        t.recent = meta.recent_totals;
        Ok(t)
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn tau(&self) -> f64 {
        self.schedule.tau_at(self.step as u64)
    }

    /// Runs one optimizer step.
    pub fn step(&mut self) -> Result<StepRecord> {
        let s = self.step;
        let train = &self.cfg.train;
        let lr = lr_at(s, train);
        let tau = self.schedule.tau_at(s as u64);
        let mut rng = seeding::stream(train.seed, seeding::TAG_TRAIN_STEP, s as u64);
        let batch = sample_batch(
            &self.docs,
            train.batch_size,
            train.p_mask_sentence,
            train.p_mask_visual,
            self.model.quantizer.width(),
            &mut rng,
        );
        let mut g = Graph::with_frozen(self.frozen.iter().copied());
        let out = pretrain_forward(
            &mut g,
            &self.model,
            &self.docs,
            &batch,
            &self.cfg.loss,
            tau,
            Relaxation::StraightThrough,
        )?;
        if !out.report.total.is_finite() {
            return Err(Error::NonFinite(format!("total loss at step {s}")));
        }
        let mut grads = g.backward(out.total);
        clip_gradients(&mut grads, train.clip_norm);
        adam_step(
            &mut self.model.store,
            &grads,
            &mut self.adam,
            &self.trainable,
            lr,
            train.weight_decay,
        )?;
        self.step += 1;
        self.recent.push(out.report.total);
        if self.recent.len() > SMOOTHING_WINDOW {
            self.recent.remove(0);
        }
        Ok(StepRecord {
            step: s,
            lr,
            tau,
            report: out.report,
            perplexity: out.perplexity,
        })
    }

    pub fn smoothed_total(&self) -> f64 {
        self.recent.iter().sum::<f64>() / self.recent.len().max(1) as f64
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (prefix, moments) in [("opt.m.", &self.adam.m), ("opt.v.", &self.adam.v)] {
            for (n, t) in names.iter().zip(moments) {
                tensors.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        Checkpoint {
            kind: "pretrain".into(),
            config: self.cfg.clone(),
            training: Some(TrainingMeta {
                step: self.step,
                tau: self.tau(),
                best: self.best,
                recent_totals: self.recent.clone(),
            }),
            tensors,
        }
    }

    /// Trains until `until` completed steps, writing metrics and checkpoints
    /// under `out` when given. Returns the records of the steps taken.
    pub fn run(&mut self, until: usize, out: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut metrics = match out {
            Some(dir) => Some(open_metrics(dir, self.step == 0, self.model.quantizer.groups)?),
            None => None,
        };
        let every = self.cfg.train.checkpoint_every;
        let mut records = Vec::new();
        while self.step < until {
            let rec = self.step()?;
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", rec.tsv()).map_err(|e| Error::io(metrics_path(out), e))?;
            }
            records.push(rec);
            let at_checkpoint = every > 0 && self.step % every == 0;
            if at_checkpoint || self.step == until {
                let smoothed = self.smoothed_total();
                let improved = at_checkpoint && self.best.map_or(true, |(b, _)| smoothed < b);
                if improved {
                    self.best = Some((smoothed, self.step));
                }
                if let Some(dir) = out {
                    if let Some(w) = metrics.as_mut() {
                        w.flush().map_err(|e| Error::io(metrics_path(out), e))?;
                    }
                    let ckpt = self.checkpoint();
                    if at_checkpoint {
                        let sd = step_dir(dir, self.step);
                        ckpt.save(&sd)?;
                        if improved {
                            copy_dir(&sd, &dir.join(BEST_DIR))?;
                        }
                    }
                    ckpt.save(&dir.join(LAST_DIR))?;
                    if self.best.is_none() {
                        ckpt.save(&dir.join(BEST_DIR))?;
                    }
                }
            }
        }
        if let Some(mut w) = metrics {
            w.flush().map_err(|e| Error::io(metrics_path(out), e))?;
        }
        Ok(records)
    }
}

fn metrics_path(out: Option<&Path>) -> PathBuf {
    out.map(|d| d.join(METRICS_FILE)).unwrap_or_default()
}

fn open_metrics(dir: &Path, fresh: bool, codebooks: usize) -> Result<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let file = if fresh {
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}", StepRecord::header(codebooks)).map_err(|e| Error::io(&path, e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?
    };
    Ok(BufWriter::new(file))
}

/// Summary of a finished pretraining run.
#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub records: Vec<StepRecord>,
    pub best: Option<(f64, usize)>,
    pub out: PathBuf,
}

/// Full pretraining run into `out`: resolved config echo, metrics, checkpoints.
pub fn pretrain(corpus: &Corpus, cfg: &RunConfig, out: &Path) -> Result<PretrainSummary> {
    let mut t = Trainer::new(cfg, corpus)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let echo = out.join(CONFIG_ECHO_FILE);
    fs::write(&echo, cfg.to_text()).map_err(|e| Error::io(&echo, e))?;
    let records = t.run(cfg.train.total_steps, Some(out))?;
    Ok(PretrainSummary {
        records,
        best: t.best,
        out: out.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("p", Tensor::new(vec![1, 1], vec![value]));
        (store, id)
    }

    fn grads_of(id: ParamId, g: f64) -> Gradients {
        let mut grads = Gradients::default();
        grads.accumulate_tensor(id, Tensor::new(vec![1, 1], vec![g]));
        grads
    }

    #[test]
    fn warmup_ramp() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(400, &cfg), 1e-5);
        assert_eq!(lr_at(2000, &cfg), 1e-5);
        assert!((lr_at(200, &cfg) - 5e-6).abs() < 1e-20);
    }

    #[test]
    fn single_adam_step_matches_hand_value() {
        let (mut store, id) = single(1.0);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads_of(id, 1.0), &mut state, &[id], 1e-5, 0.0).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let expected = 1.0 - 1e-5 * (1.0 / (1.0 + 1e-8));
        assert!((store.get(id).item() - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_fixed_point_and_pure_decay() {
        let (mut store, id) = single(0.75);
        let mut state = AdamState::new(&store);
        adam_step(&mut store, &grads_of(id, 0.0), &mut state, &[id], 1e-3, 0.0).unwrap();
        assert_eq!(store.get(id).item(), 0.75);
        adam_step(&mut store, &grads_of(id, 0.0), &mut state, &[id], 1e-3, 1e-4).unwrap();
        assert_eq!(store.get(id).item(), 0.75 * (1.0 - 1e-3 * 1e-4));
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let (mut store, id) = single(1.0);
        let mut state = AdamState::new(&store);
        let err = adam_step(&mut store, &grads_of(id, f64::NAN), &mut state, &[id], 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(store.get(id).item(), 1.0);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let (_, id) = single(0.0);
        let mut grads = grads_of(id, 12.0);
        assert_eq!(clip_gradients(&mut grads, 5.0), 12.0);
        assert!((grads.global_norm() - 5.0).abs() < 1e-12);
        let mut small = grads_of(id, 3.0);
        clip_gradients(&mut small, 5.0);
        assert_eq!(small.global_norm(), 3.0);
    }

    #[test]
    fn smoothing_window() {
        let totals: Vec<f64> = (1..=12).map(f64::from).collect();
        let s = smoothed(&totals);
        assert_eq!(s[0], 1.0);
        assert_eq!(s[9], 5.5);
        assert_eq!(s[11], 7.5);
    }
}

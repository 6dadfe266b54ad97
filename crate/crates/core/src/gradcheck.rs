//! Central finite-difference verification of every trainable tensor.

use std::fmt;

use crate::autograd::{Graph, OpKind};
use crate::config::RunConfig;
use crate::corpus::generate_corpus;
use crate::error::{Error, Result};
use crate::model::{prepare_docs, pretrain_forward, DocInput, DocSample, UdocModel};
use crate::params::ParamId;
use crate::quantizer::{sample_gumbel, Relaxation};
use crate::seeding;
use crate::sequence::{MaskCategory, MaskPlan, SentenceMask};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Floor on the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl TensorCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub loss: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(TensorCheck::passed)
    }

    pub fn failures(&self) -> Vec<&TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed()).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tensors {
            writeln!(
                f,
                "{}\t{}\t{:.3e}\t{:.3e}\t{}",
                t.name,
                t.entries,
                t.max_rel_err,
                t.max_abs_err,
                if t.passed() { "ok" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "{} tensors, max relative error {:.3e}: {}",
            self.tensors.len(),
            self.max_rel_err(),
            if self.passed() { "pass" } else { "fail" }
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// A fixed two-document batch: sentence masks at slots 1 (mask) and 2
/// (random), a visual mask at slot 2, frozen Gumbel draws.
pub fn fixed_batch(cfg: &RunConfig, seed: u64) -> Result<(UdocModel, Vec<DocInput>, Vec<DocSample>)> {
    let corpus = generate_corpus(seed, 2, &cfg.corpus)?;
    let model = UdocModel::new(cfg, seed);
    let docs = prepare_docs(&corpus.docs, &model.text)?;
    if docs.iter().any(|d| d.regions() < 2) {
        return Err(Error::Config("gradcheck needs at least two regions per document".into()));
    }
    let mut rng = seeding::stream(seed, seeding::TAG_TRAIN_STEP, u64::MAX);
    let batch = (0..docs.len())
        .map(|d| {
            let plan = MaskPlan {
                sentences: vec![
                    SentenceMask {
                        slot: 1,
                        category: MaskCategory::Mask,
                    },
                    SentenceMask {
                        slot: 2,
                        category: MaskCategory::Random,
                    },
                ],
                visual: vec![2],
            };
            let other = &docs[1 - d];
            DocSample {
                doc: d,
                plan,
                randoms: vec![other.sentences[0].clone()],
                gumbel: sample_gumbel(&mut rng, docs[d].regions(), model.quantizer.width()),
            }
        })
        .collect();
    Ok((model, docs, batch))
}

/// Checks every tensor trainable under the configured tasks. `fault`
/// corrupts the backward rule of one op kind in the analytic pass.
pub fn gradcheck(cfg: &RunConfig, fault: Option<OpKind>) -> Result<GradcheckReport> {
    let (mut model, docs, batch) = fixed_batch(cfg, cfg.train.seed)?;
    let tasks = cfg.loss.tasks;
    let tau = cfg.train.tau_start;
    let frozen = model.frozen(&tasks);
    let trainable: Vec<ParamId> = model.trainable(&tasks);

    let mut g = Graph::with_frozen(frozen.iter().copied());
    if let Some(kind) = fault {
        g.inject_backward_fault(kind);
    }
    let out = pretrain_forward(&mut g, &model, &docs, &batch, &cfg.loss, tau, Relaxation::Soft)?;
    let loss = out.report.total;
    let grads = g.backward(out.total);

    let eval = |m: &UdocModel| -> Result<f64> {
        let mut g = Graph::new();
        let out = pretrain_forward(&mut g, m, &docs, &batch, &cfg.loss, tau, Relaxation::Soft)?;
        Ok(out.report.total)
    };

    let mut tensors = Vec::with_capacity(trainable.len());
    for id in trainable {
        let n = model.store.get(id).len();
        let analytic = grads.get(id).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
        for k in 0..n {
            let orig = model.store.get(id).data()[k];
            model.store.get_mut(id).data_mut()[k] = orig + STEP;
            let plus = eval(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig - STEP;
            let minus = eval(&model)?;
            model.store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_rel = max_rel.max(relative_error(analytic[k], numeric));
            max_abs = max_abs.max((analytic[k] - numeric).abs());
        }
        tensors.push(TensorCheck {
            name: model.store.name(id).to_string(),
            entries: n,
            max_rel_err: max_rel,
            max_abs_err: max_abs,
        });
    }
    Ok(GradcheckReport { tensors, loss })
}
